"""Harmonic patches and branched majorants.

A patch is a harmonic function on a smoothly bounded subdomain, represented by
its boundary data, truncated from above at the gain cap g*, and +inf off its
closed domain.  A branched majorant attaches successor majorants at interior
boundary points through a lazy extension map; the matching error accumulates
value mismatches at the interfaces down the tree.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import rng as rngmod
from .gain import GainField
from .geometry import (Annulus, Ball, Cap, Domain, FullBall, GridRegion, boundary_samples,
                       domain_dim, ray_exit, signed_distance)
from .harmonic import (INF, BoundaryData, WosConfig, constant_data,
                       poisson_ball_eval, radial_annulus_harmonic, wos_harmonic_eval)

GEOM_TOL = 1e-9


class MajorantError(ValueError):
    pass


class ContiguityError(MajorantError):
    """An extension map returned a majorant that does not contain its query point."""


class ExtensionInfeasibleError(MajorantError):
    """Lipschitz extension preconditions do not hold at the requested point."""


# ---------------------------------------------------------------------------
# Harmonic patches
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class HarmonicPatch:
    """Truncated harmonic function on a subdomain.

    klass "H1" marks globally majorising patches: boundary data equals g* on
    every boundary portion strictly inside the unit ball.  The shift field
    implements upward translation (values are min(raw + shift, gstar)).
    """

    domain: Domain
    data: BoundaryData
    gstar: float
    klass: str
    lipschitz_bound: float
    raw_value: Callable[[np.ndarray], np.ndarray]
    shift: float = 0.0
    label: str = "patch"

    def __post_init__(self):
        if self.klass not in ("H0", "H1"):
            raise MajorantError(f"unknown patch class {self.klass!r}")
        if self.shift < 0.0:
            raise MajorantError("patch shift must be nonnegative")

    @property
    def dim(self) -> int:
        return domain_dim(self.domain)

    def value(self, x) -> float | np.ndarray:
        """Patch value: min(raw + shift, gstar) on the closed domain, +inf outside."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        single = np.asarray(x).ndim == 1
        sd = np.atleast_1d(signed_distance(self.domain, pts))
        out = np.full(pts.shape[0], INF)
        inside = sd <= GEOM_TOL
        if inside.any():
            raw = np.atleast_1d(np.asarray(self.raw_value(pts[inside]), dtype=float))
            out[inside] = np.minimum(raw + self.shift, self.gstar)
        return float(out[0]) if single else out

    def boundary_value(self, x) -> float | np.ndarray:
        """Effective data at boundary points: min(data + shift, gstar).

        Exact and cheap where value() would need a Monte Carlo evaluation.
        """
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        single = np.asarray(x).ndim == 1
        out = np.minimum(np.atleast_1d(np.asarray(self.data(pts), dtype=float)) + self.shift,
                         self.gstar)
        return float(out[0]) if single else out

    def translated(self, c: float) -> "HarmonicPatch":
        return replace(self, shift=self.shift + c)


def constant_patch(level: float, gstar: float, dim: int = 2, label: str | None = None) -> HarmonicPatch:
    if not 0.0 <= level <= gstar:
        raise MajorantError("constant level must lie in [0, gstar]")
    return HarmonicPatch(
        domain=FullBall(dim),
        data=constant_data(level),
        gstar=gstar,
        klass="H1",  # no free boundary inside the ball
        lipschitz_bound=0.0,
        raw_value=lambda pts: np.full(pts.shape[0], float(level)),
        label=label or f"const[{level:.4g}]",
    )


def annulus_patch(a: float, b: float, va: float, vb: float, gstar: float, dim: int = 2,
                  label: str | None = None) -> HarmonicPatch:
    """Radial harmonic patch on the annulus a < |x| < b with sphere values va, vb."""
    for v in (va, vb):
        if not 0.0 <= v <= gstar:
            raise MajorantError("sphere values must lie in [0, gstar]")
    dom = Annulus(center=(0.0,) * dim, inner=a, outer=b)

    def raw(pts: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(pts, axis=1)
        r = np.clip(r, a, b)
        return np.atleast_1d(radial_annulus_harmonic(a, b, va, vb, r, dim))

    def data_eval(pts: np.ndarray) -> np.ndarray:
        r = np.linalg.norm(pts, axis=1)
        return np.where(np.abs(r - a) < np.abs(r - b), va, vb)

    # |grad| peaks at the inner sphere.
    if dim == 2:
        lip = abs(vb - va) / (math.log(b / a) * a)
    else:
        p = 2.0 - dim
        lip = abs(vb - va) * abs(p) * a ** (p - 1.0) / abs(b ** p - a ** p)
    interior_gstar = (abs(va - gstar) < 1e-12) and (b >= 1.0 - 1e-12 or abs(vb - gstar) < 1e-12)
    return HarmonicPatch(
        domain=dom,
        data=BoundaryData(evaluator=data_eval, gstar_on_interior=interior_gstar),
        gstar=gstar,
        klass="H1" if interior_gstar else "H0",
        lipschitz_bound=lip,
        raw_value=raw,
        label=label or f"annulus[{a:.4g},{b:.4g}]",
    )


def annulus_to_boundary_patch(a: float, gstar: float, dim: int = 2) -> HarmonicPatch:
    """The globally majorising annulus patch: inner data g*, zero on the unit sphere."""
    return annulus_patch(a, 1.0, gstar, 0.0, gstar, dim=dim, label=f"annulus[{a:.4g},1]*")


def cap_patch(direction, z: float, gstar: float, c: float = 1.0,
              label: str | None = None) -> HarmonicPatch:
    """Affine harmonic (c - u.v)/z on its natural domain {value < gstar}."""
    v = np.asarray(direction, dtype=float)
    threshold = c - z * gstar
    if not -1.0 < threshold < 1.0:
        raise MajorantError("cap parameters leave no domain inside the ball")
    dom = Cap(direction=tuple(v), threshold=threshold)

    def raw(pts: np.ndarray) -> np.ndarray:
        return (c - pts @ v) / z

    def data_eval(pts: np.ndarray) -> np.ndarray:
        return np.clip((c - pts @ v) / z, 0.0, gstar)

    return HarmonicPatch(
        domain=dom,
        data=BoundaryData(evaluator=data_eval, gstar_on_interior=True),
        gstar=gstar,
        klass="H1",  # the flat boundary portion sits exactly at the gstar level set
        lipschitz_bound=1.0 / z,
        raw_value=raw,
        label=label or f"cap[z={z:.4g}]",
    )


def ball_patch(center, radius: float, data: BoundaryData, gstar: float,
               lipschitz_bound: float | None = None, nodes: int = 256,
               label: str | None = None) -> HarmonicPatch:
    """Poisson-quadrature patch on a ball with general boundary data."""
    center = np.asarray(center, dtype=float)
    dom = Ball(center=tuple(center), radius=radius)

    def raw(pts: np.ndarray) -> np.ndarray:
        return np.atleast_1d(poisson_ball_eval(center, radius, data, pts, nodes=nodes))

    if lipschitz_bound is None:
        # Gradient bound for bounded harmonic functions, d * osc / radius.
        samples = data(boundary_samples(dom, 64))
        lipschitz_bound = len(center) * float(samples.max() - samples.min() + 1e-12) / radius
    bvals = data(boundary_samples(dom, 64))
    if np.any(bvals < -1e-12) or np.any(bvals > gstar + 1e-12):
        raise MajorantError("boundary data must lie in [0, gstar]")
    touches = np.linalg.norm(center) + radius >= 1.0 - 1e-12
    h1 = bool(data.gstar_on_interior or (touches and radius >= 1.0 - 1e-12)
              or np.all(np.abs(bvals - gstar) < 1e-12))
    return HarmonicPatch(
        domain=dom,
        data=data,
        gstar=gstar,
        klass="H1" if h1 else "H0",
        lipschitz_bound=float(lipschitz_bound),
        raw_value=raw,
        label=label or f"ball[r={radius:.4g}]",
    )


def grid_patch(region: GridRegion, data: BoundaryData, gstar: float,
               wos: WosConfig, lipschitz_bound: float,
               label: str = "grid") -> HarmonicPatch:
    """Walk-on-spheres patch on a grid region; evaluations are seeded per point."""

    def raw(pts: np.ndarray) -> np.ndarray:
        out = np.empty(pts.shape[0])
        for i, p in enumerate(pts):
            key = hash(tuple(np.round(p, 9))) & 0x7FFFFFFF
            gen = rngmod.stream(wos.seed, key)
            out[i] = wos_harmonic_eval(region, data, p, wos, generator=gen)[0]
        return out

    return HarmonicPatch(
        domain=region,
        data=data,
        gstar=gstar,
        klass="H1" if data.gstar_on_interior else "H0",
        lipschitz_bound=lipschitz_bound,
        raw_value=raw,
        label=label,
    )


# ---------------------------------------------------------------------------
# Branched majorants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExtensionMap:
    """Lazy map from interior-boundary points to successor majorants."""

    query: Callable[[np.ndarray], "BranchedMajorant"]
    contiguous: bool = True

    def __call__(self, u: np.ndarray) -> "BranchedMajorant":
        return self.query(np.asarray(u, dtype=float))


@dataclass(frozen=True, eq=False)
class BranchedMajorant:
    base: HarmonicPatch
    extension: Optional[ExtensionMap]
    depth: int
    error_bound: float = 0.0

    def __post_init__(self):
        if self.depth < 1:
            raise MajorantError("depth must be at least 1")
        if self.depth == 1:
            if self.extension is not None or self.error_bound != 0.0:
                raise MajorantError("depth-1 majorants carry no extension and zero error")
        elif self.extension is None:
            raise MajorantError("branched majorants of depth > 1 need an extension map")
        if self.error_bound < 0.0:
            raise MajorantError("error bound must be nonnegative")

    def value(self, x) -> float | np.ndarray:
        return self.base.value(x)


def leaf(patch: HarmonicPatch) -> BranchedMajorant:
    return BranchedMajorant(base=patch, extension=None, depth=1, error_bound=0.0)


def branched(patch: HarmonicPatch, query: Callable[[np.ndarray], BranchedMajorant],
             depth: int, error_bound: float) -> BranchedMajorant:
    return BranchedMajorant(base=patch, extension=ExtensionMap(query=query),
                            depth=depth, error_bound=error_bound)


def patch_value(h: BranchedMajorant | HarmonicPatch, x) -> float | np.ndarray:
    """Pointwise evaluation: base-patch value inside, +inf outside the closed domain."""
    return h.value(x)


def interior_boundary_samples(h: BranchedMajorant, count: int) -> np.ndarray:
    """Boundary samples off the unit sphere where the data sits below gstar."""
    if count < 1:
        raise MajorantError("sample count must be at least 1")
    base = h.base
    pts = boundary_samples(base.domain, max(count * 2, 8))
    radius = np.linalg.norm(pts, axis=1)
    off_sphere = radius < 1.0 - 1e-9
    if not off_sphere.any():
        return np.zeros((0, pts.shape[1]))
    pts = pts[off_sphere]
    vals = np.minimum(np.atleast_1d(np.asarray(base.data(pts), dtype=float)) + base.shift,
                      base.gstar)
    open_data = vals < base.gstar - 1e-12
    pts = pts[open_data]
    if pts.shape[0] > count:
        idx = np.linspace(0, pts.shape[0] - 1, count).astype(int)
        pts = pts[idx]
    return pts


def matching_error(h: BranchedMajorant, samples_per_level: int = 64) -> tuple[float, float]:
    """(sup interface mismatch, accumulated norm) measured on boundary samples.

    Exactly (0, 0) for depth-1 majorants.
    """
    memo: dict[int, tuple[float, float]] = {}

    def rec(node: BranchedMajorant, count: int) -> tuple[float, float]:
        key = id(node)
        if key in memo:
            return memo[key]
        if node.extension is None:
            memo[key] = (0.0, 0.0)
            return memo[key]
        pts = interior_boundary_samples(node, count)
        if pts.shape[0] == 0:
            memo[key] = (0.0, 0.0)
            return memo[key]
        delta = 0.0
        worst_child = 0.0
        for p in pts:
            child = node.extension(p)
            cv = child.value(p)
            if not np.isfinite(cv):
                raise ContiguityError(f"extension at {p} does not contain its query point")
            delta = max(delta, abs(float(node.base.boundary_value(p)) - float(cv)))
            worst_child = max(worst_child, rec(child, max(count // 2, 8))[1])
        memo[key] = (delta, delta + worst_child)
        return memo[key]

    return rec(h, samples_per_level)


def upward_translate(h: BranchedMajorant, c: float) -> BranchedMajorant:
    """Shift every patch of the tree up by c, truncating at gstar.

    Truncation contracts interface mismatches, so the stored error bound
    remains valid.
    """
    if c < 0.0:
        raise MajorantError("upward translation needs c >= 0")
    if c == 0.0:
        return h
    base = h.base.translated(c)
    if h.extension is None:
        return BranchedMajorant(base=base, extension=None, depth=1, error_bound=0.0)
    old = h.extension
    ext = ExtensionMap(query=lambda u: upward_translate(old(u), c), contiguous=old.contiguous)
    return BranchedMajorant(base=base, extension=ext, depth=h.depth, error_bound=h.error_bound)


def majorises_gain(h: BranchedMajorant | HarmonicPatch, gain: GainField, probes: int = 512,
                   seed: int = 7, tol: float = 1e-9,
                   _depth_budget: int = 3) -> tuple[bool, float]:
    """Check h >= gain on domain probes, recursing into sampled children.

    Returns (ok, worst signed gap); a negative gap is the deepest violation found.
    """
    base = h.base if isinstance(h, BranchedMajorant) else h
    dom = base.domain
    gen = rngmod.stream(seed, 12345)
    d = domain_dim(dom)
    pts = _domain_probes(dom, probes, gen, d)
    worst = np.inf
    if pts.shape[0]:
        vals = np.atleast_1d(base.value(pts))
        gaps = vals - gain(pts)
        worst = float(np.min(gaps))
    if isinstance(h, BranchedMajorant) and h.extension is not None and _depth_budget > 0:
        for p in interior_boundary_samples(h, 16):
            child = h.extension(p)
            _, child_worst = majorises_gain(child, gain, probes=max(probes // 4, 32),
                                            seed=seed + 1, tol=tol,
                                            _depth_budget=_depth_budget - 1)
            worst = min(worst, child_worst)
    return worst >= -tol, worst


def _domain_probes(dom: Domain, count: int, gen: np.random.Generator, d: int) -> np.ndarray:
    if isinstance(dom, Ball):
        lo = np.asarray(dom.center) - dom.radius
        hi = np.asarray(dom.center) + dom.radius
    elif isinstance(dom, Annulus):
        lo = np.asarray(dom.center) - dom.outer
        hi = np.asarray(dom.center) + dom.outer
    else:
        lo = -np.ones(d)
        hi = np.ones(d)
    pts = gen.uniform(lo, hi, size=(count * 3, d))
    inside = np.atleast_1d(signed_distance(dom, pts)) < -1e-12
    pts = pts[inside][:count]
    return pts


# ---------------------------------------------------------------------------
# Continuous regularisation
# ---------------------------------------------------------------------------

def continuous_regularisation(h: BranchedMajorant, gain: GainField | None = None,
                              samples: int = 256) -> BranchedMajorant:
    """Upward-translate the patches of h so interface mismatches vanish.

    The base is lifted by the measured sup mismatch against regularised
    children; each child is then lifted pointwise to value-match the new base
    exactly at its attachment point.  The result sandwiches between h and
    h + |h| and has (sampled) zero matching error.
    """
    if gain is not None:
        ok, worst = majorises_gain(h, gain, probes=min(samples, 256))
        if not ok:
            raise MajorantError(f"regularisation requires h >= gain (worst gap {worst:.3g})")
    memo: dict[int, BranchedMajorant] = {}

    def rec(node: BranchedMajorant) -> BranchedMajorant:
        key = id(node)
        if key in memo:
            return memo[key]
        if node.extension is None:
            memo[key] = node
            return node
        pts = interior_boundary_samples(node, samples)
        old_ext = node.extension
        if pts.shape[0] == 0:
            delta0 = 0.0
        else:
            mismatches = []
            for p in pts:
                child0 = rec(old_ext(p))
                mismatches.append(abs(float(node.base.boundary_value(p))
                                      - float(child0.value(p))))
            delta0 = float(max(mismatches))

        new_base = node.base.translated(delta0)

        def query(u: np.ndarray, _node=node, _delta0=delta0) -> BranchedMajorant:
            child0 = rec(_node.extension(u))
            lift = float(_node.base.boundary_value(u)) + _delta0 - float(child0.value(u))
            return upward_translate(child0, max(lift, 0.0))

        out = BranchedMajorant(base=new_base, extension=ExtensionMap(query=query),
                               depth=node.depth, error_bound=0.0 if node.depth == 1 else 0.0)
        memo[key] = out
        return out

    return rec(h)


# ---------------------------------------------------------------------------
# Lipschitz extension along half-lines
# ---------------------------------------------------------------------------

def ray_patch_sequence(h: BranchedMajorant, x: np.ndarray, u: np.ndarray,
                       gstar: float) -> BranchedMajorant:
    """Walk the extension structure along the segment from x to u.

    Deterministic version of the pathwise extension procedure: whenever the
    half-line exits the current patch domain through an interior boundary
    point, the extension map supplies the successor; stops as soon as the
    current domain contains u.
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    direction = u - x
    dist = float(np.linalg.norm(direction))
    if dist == 0.0:
        return h
    direction = direction / dist
    current = h
    pos = x
    for _ in range(64):
        if float(signed_distance(current.base.domain, u)) < -GEOM_TOL:
            return current
        t, exit_pt = ray_exit(current.base.domain, pos, direction)
        value = float(current.base.boundary_value(exit_pt))
        if value >= gstar * (1.0 - 1e-9) or np.linalg.norm(exit_pt) >= 1.0 - 1e-9:
            raise ExtensionInfeasibleError(
                "half-line reached a terminal boundary before covering the target")
        if current.extension is None:
            raise ExtensionInfeasibleError("ran out of branching depth along the half-line")
        nxt = current.extension(exit_pt)
        if not np.isfinite(float(nxt.value(exit_pt))):
            raise ContiguityError(f"successor patch does not contain {exit_pt}")
        current = nxt
        pos = exit_pt + direction * GEOM_TOL
    raise ExtensionInfeasibleError("half-line walk did not stabilise")


def tree_lipschitz_bound(h: BranchedMajorant, samples: int = 16) -> float:
    """Max patch Lipschitz bound over the (sampled) tree."""
    bound = h.base.lipschitz_bound
    if h.extension is not None:
        for p in interior_boundary_samples(h, samples):
            bound = max(bound, tree_lipschitz_bound(h.extension(p), max(samples // 2, 4)))
    return bound


def lipschitz_extension(h: BranchedMajorant, x, eps: float, eps1: float,
                        gain: GainField, check_norm: bool = True) -> ExtensionMap:
    """Extension map on the ball B(x, eps1), built along half-lines from x.

    Preconditions: x in the open base domain, h(x) < g*, measured |h| < eps,
    eps < g* - h(x), and eps1 < min(dist(x, unit sphere), (g* - h(x) - eps)/M).
    """
    x = np.asarray(x, dtype=float)
    gstar = h.base.gstar
    hx = float(h.value(x))
    if float(signed_distance(h.base.domain, x)) >= 0.0:
        raise ExtensionInfeasibleError("x must lie in the open base domain")
    if not hx < gstar:
        raise ExtensionInfeasibleError("h(x) must sit strictly below gstar")
    if check_norm:
        _, norm = matching_error(h)
        if not norm < eps:
            raise ExtensionInfeasibleError(f"matching norm {norm:.3g} is not below eps={eps}")
    if not eps < gstar - hx:
        raise ExtensionInfeasibleError("eps must be smaller than gstar - h(x)")
    m = tree_lipschitz_bound(h)
    limit = min(1.0 - float(np.linalg.norm(x)), (gstar - hx - eps) / m if m > 0 else np.inf)
    if not eps1 < limit:
        raise ExtensionInfeasibleError(
            f"eps1={eps1} is not below min(dist to sphere, (gstar-h(x)-eps)/M)={limit:.4g}")

    def query(u: np.ndarray) -> BranchedMajorant:
        u = np.asarray(u, dtype=float)
        if np.linalg.norm(u - x) > eps1 + GEOM_TOL:
            raise ExtensionInfeasibleError("query point outside the extension ball")
        if np.allclose(u, x, atol=1e-15):
            return h
        if h.extension is None:
            # Unbranched case: the whole ball B(x, eps1) sits inside d(h).
            if float(signed_distance(h.base.domain, u)) >= GEOM_TOL:
                raise ContiguityError("unbranched patch does not cover the extension ball")
            return h
        return ray_patch_sequence(h, x, u, gstar)

    return ExtensionMap(query=query)


# ---------------------------------------------------------------------------
# Tree serialisation
# ---------------------------------------------------------------------------

def tree_json(h: BranchedMajorant, samples: int = 8) -> dict:
    """Nodes and attachment edges of the (sampled) majorant tree."""
    nodes: list[dict] = []
    edges: list[dict] = []

    def rec(node: BranchedMajorant) -> int:
        nid = len(nodes)
        nodes.append({
            "id": nid,
            "domain": node.base.label,
            "class": node.base.klass,
            "depth": node.depth,
            "error_bound": node.error_bound,
        })
        if node.extension is not None:
            for p in interior_boundary_samples(node, samples):
                child = node.extension(p)
                cid = rec(child)
                edges.append({"parent": nid, "child": cid,
                              "at": [float(v) for v in p]})
        return nid

    rec(h)
    return {"nodes": nodes, "edges": edges}


def dump_tree_json(h: BranchedMajorant, path, samples: int = 8) -> None:
    with open(path, "w") as fh:
        json.dump(tree_json(h, samples=samples), fh, indent=2, sort_keys=True)
