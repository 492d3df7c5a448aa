"""Envelopes over patch dictionaries and iterated balayage on non-contact sets.

The unbranched envelope scans a parametric dictionary of globally majorising
patches (constants, boundary-tangent caps, annulus-to-boundary patches) and is
an upper bound on the true infimum.  Refinement replaces the field on each
non-contact component by the component's obstacle-respecting harmonic
replacement, which coincides with plain log/power interpolation whenever the
interpolant clears the gain.  The plain replacement (which may dip below the
gain, and does for spiked gains) is kept as the balayage diagnostic.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .gain import GainField, outer_running_max
from .geometry import Annulus, Ball, GridRegion
from .grids import cartesian_grid, scale_coordinate
from .majorant import (BranchedMajorant, ExtensionMap, HarmonicPatch, annulus_patch,
                       annulus_to_boundary_patch, branched, cap_patch, constant_patch,
                       leaf, MajorantError)

CONTACT_TOL = 1e-9
RELAX_TOL = 1e-11


class EnvelopeError(ValueError):
    pass


class ConvergenceError(EnvelopeError):
    """A relaxation loop hit its iteration limit; carries the residual."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class NoWitnessError(EnvelopeError):
    """Witness requested at a contact point."""


# ---------------------------------------------------------------------------
# Grid fields and contact sets
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GridField:
    """Scalar field on a radial or 2-d Cartesian grid."""

    kind: str
    values: np.ndarray
    tag: str
    dim: int = 2
    radii: Optional[np.ndarray] = None
    spacing: Optional[float] = None
    coords: Optional[np.ndarray] = None
    inside: Optional[np.ndarray] = None

    def copy_with(self, values: np.ndarray, tag: str) -> "GridField":
        return GridField(kind=self.kind, values=values, tag=tag, dim=self.dim,
                         radii=self.radii, spacing=self.spacing, coords=self.coords,
                         inside=self.inside)

    @property
    def scale(self) -> np.ndarray:
        if self.kind != "radial":
            raise EnvelopeError("scale coordinate is for radial fields")
        return scale_coordinate(self.radii, self.dim)

    def interpolate(self, x) -> float | np.ndarray:
        """Field value at arbitrary points (linear in the scale coordinate or bilinear)."""
        if self.kind == "radial":
            r = np.asarray(x, dtype=float)
            if r.ndim == 2:
                r = np.linalg.norm(r, axis=1)
            single = r.ndim == 0
            r = np.atleast_1d(r)
            r = np.clip(r, self.radii[0], self.radii[-1])
            s = scale_coordinate(r, self.dim)
            out = np.interp(s, self.scale, self.values)
            return float(out[0]) if single else out
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        single = np.asarray(x).ndim == 1
        n = self.values.shape[0]
        sp = self.spacing
        lo = self.coords[0, 0]
        fx = np.clip((pts[:, 0] - lo[0]) / sp, 0.0, n - 1.000001)
        fy = np.clip((pts[:, 1] - lo[1]) / sp, 0.0, n - 1.000001)
        ix, iy = fx.astype(int), fy.astype(int)
        tx, ty = fx - ix, fy - iy
        v = self.values
        out = (v[ix, iy] * (1 - tx) * (1 - ty) + v[ix + 1, iy] * tx * (1 - ty)
               + v[ix, iy + 1] * (1 - tx) * ty + v[ix + 1, iy + 1] * tx * ty)
        return float(out[0]) if single else out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            if self.kind == "radial":
                fh.write("# units: r in unit-ball lengths, value in payoff units\n")
                writer.writerow(["r", "value"])
                for r, v in zip(self.radii, self.values):
                    writer.writerow([f"{r:.12g}", f"{v:.12g}"])
            else:
                fh.write("# units: x,y in unit-ball lengths, value in payoff units\n")
                writer.writerow(["x", "y", "value"])
                n = self.values.shape[0]
                for i in range(n):
                    for j in range(n):
                        writer.writerow([f"{self.coords[i, j, 0]:.12g}",
                                         f"{self.coords[i, j, 1]:.12g}",
                                         f"{self.values[i, j]:.12g}"])


def radial_field(radii: np.ndarray, values: np.ndarray, tag: str, dim: int = 2) -> GridField:
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise EnvelopeError("field values must be finite")
    return GridField(kind="radial", values=values, tag=tag, dim=dim,
                     radii=np.asarray(radii, dtype=float))


def cartesian_field(n: int, values: np.ndarray, tag: str) -> GridField:
    coords, spacing = cartesian_grid(n)
    inside = np.linalg.norm(coords, axis=-1) < 1.0
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise EnvelopeError("field values must be finite")
    return GridField(kind="cartesian", values=values, tag=tag, dim=2,
                     spacing=spacing, coords=coords, inside=inside)


def gain_on_grid(gain: GainField, fld: GridField) -> np.ndarray:
    if fld.kind == "radial":
        return gain.profile(fld.radii)
    pts = fld.coords.reshape(-1, 2)
    return gain(pts).reshape(fld.values.shape)


@dataclass(eq=False)
class ContactSet:
    """Contact mask (true where the field sits on the gain) and non-contact components."""

    contact_mask: np.ndarray
    noncontact_mask: np.ndarray
    labels: np.ndarray
    n_components: int
    tol: float

    def component_of(self, index) -> int:
        """Component label at a node index (0 means contact)."""
        return int(self.labels[index])


def contact_set(w: GridField, gain: GainField, tol: float = CONTACT_TOL) -> ContactSet:
    gvals = gain_on_grid(gain, w)
    if np.any(w.values < gvals - 100 * tol):
        raise EnvelopeError("field drops below the gain; not an envelope")
    close = (w.values - gvals) <= tol
    if w.kind == "radial":
        contact = close
        noncontact = ~contact
        labels = np.zeros(len(w.values), dtype=int)
        label = 0
        for i0, i1 in _runs(noncontact):
            label += 1
            labels[i0:i1 + 1] = label
        return ContactSet(contact_mask=contact, noncontact_mask=noncontact,
                          labels=labels, n_components=label, tol=tol)
    inside = w.inside
    contact = close & inside
    noncontact = inside & ~contact
    struct = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    labels, n = ndimage.label(noncontact, structure=struct)
    return ContactSet(contact_mask=contact, noncontact_mask=noncontact,
                      labels=labels, n_components=int(n), tol=tol)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of True as inclusive (start, stop) index pairs."""
    out = []
    i = 0
    n = len(mask)
    while i < n:
        if mask[i]:
            j = i
            while j + 1 < n and mask[j + 1]:
                j += 1
            out.append((i, j))
            i = j + 1
        else:
            i += 1
    return out


# ---------------------------------------------------------------------------
# Unbranched envelope over the patch dictionary
# ---------------------------------------------------------------------------

FAMILY_CONSTANT = 0
FAMILY_CAP = 1
FAMILY_ANNULUS = 2


@dataclass(eq=False)
class EnvelopeRun:
    """Unbranched envelope plus the dictionary bookkeeping needed for witnesses."""

    field: GridField
    gain: GainField
    family: np.ndarray           # per-node best family code
    index: np.ndarray            # per-node family parameter index
    zstar: float                 # cap slope parameter (by direction for cartesian)
    zstar_by_dir: Optional[np.ndarray]
    directions: Optional[np.ndarray]
    annulus_inner: Optional[float]
    class_lipschitz: float

    def best_patch(self, x) -> HarmonicPatch:
        """Dictionary patch achieving the envelope at (the node nearest) x.

        Memoised per node so repeated queries share patch objects (the path
        machinery batches walks by patch identity).
        """
        gain = self.gain
        x = np.asarray(x, dtype=float)
        if self.field.kind == "radial":
            r = float(np.linalg.norm(x)) if x.ndim else float(x)
            i = int(np.argmin(np.abs(self.field.radii - r)))
        else:
            sp = self.field.spacing
            lo = self.field.coords[0, 0]
            i = (int(round((x[0] - lo[0]) / sp)), int(round((x[1] - lo[1]) / sp)))
        fam = int(self.family[i])
        if fam == FAMILY_CAP and self.zstar_by_dir is None:
            # Radial caps are rotated to pass through the query direction.
            direction = x / np.linalg.norm(x)
            key = (fam, round(float(np.arctan2(*direction[:2][::-1])), 9))
        else:
            key = (fam, int(self.index[i]) if np.ndim(self.index[i]) == 0 else i)
        cache = self.__dict__.setdefault("_patch_cache", {})
        if key in cache:
            return cache[key]
        if fam == FAMILY_CONSTANT:
            patch = constant_patch(gain.max_gain, gain.gstar, dim=gain.dim)
        elif fam == FAMILY_CAP:
            direction = x / np.linalg.norm(x)
            z = self.zstar
            if self.zstar_by_dir is not None:
                k = int(self.index[i])
                direction = self.directions[k]
                z = float(self.zstar_by_dir[k])
            patch = cap_patch(direction, z, gain.gstar)
        elif fam == FAMILY_ANNULUS:
            patch = annulus_to_boundary_patch(self.annulus_inner, gain.gstar, dim=gain.dim)
        else:
            raise EnvelopeError(f"unknown family code {fam}")
        cache[key] = patch
        if len(cache) > 4096:
            cache.pop(next(iter(cache)))
        return patch


def unbranched_envelope(gain: GainField, grid, dictionary: dict | None = None) -> EnvelopeRun:
    """Pointwise minimum over the feasible patch dictionary.

    The dictionary always contains the constant at the max gain (feasible for
    every gain, so the envelope is defined even when everything else fails),
    boundary-tangent caps, and for radial gains the annulus-to-boundary family
    with inner radii on the grid.
    """
    cfg = {"constants": True, "caps": True, "annuli": gain.radial}
    if dictionary:
        cfg.update(dictionary)
    if isinstance(grid, (int, np.integer)):
        return _envelope_cartesian(gain, int(grid), cfg)
    return _envelope_radial(gain, np.asarray(grid, dtype=float), cfg)


def _cap_zstar_radial(gain: GainField, radii: np.ndarray) -> float:
    """Largest feasible cap slope parameter, conservatively over probe gaps.

    On [p_i, p_{i+1}] the slice maximum G is bounded by G(p_i) (G is a
    nonincreasing running max) while the cap's lever 1 - p is at least
    1 - p_{i+1}, so requiring (1 - p_{i+1})/G(p_i) >= z is rigorous even for
    discontinuous gains.
    """
    profile_grid = np.linspace(0.0, 1.0, 4096)
    big = outer_running_max(gain, profile_grid)
    lever = 1.0 - np.concatenate([profile_grid[1:], [1.0]])
    pos = big > 1e-14
    if not pos.any():
        raise EnvelopeError("gain has no positive part")
    return float(np.min(lever[pos] / big[pos]))


def _envelope_radial(gain: GainField, radii: np.ndarray, cfg: dict) -> EnvelopeRun:
    d = gain.dim
    K = len(radii)
    gvals = gain.profile(radii)
    gstar = gain.gstar
    gbar = gain.max_gain
    psi = scale_coordinate(1.0, d) - scale_coordinate(radii, d)  # >= 0, decreasing

    values = np.full(K, gbar)
    family = np.full(K, FAMILY_CONSTANT, dtype=int)
    index = np.zeros(K, dtype=int)
    class_lip = 0.0

    zstar = _cap_zstar_radial(gain, radii) if cfg.get("caps", True) else None
    if zstar is not None:
        cap_vals = (1.0 - radii) / zstar
        cap_vals = np.where(cap_vals <= gstar, cap_vals, np.inf)
        better = cap_vals < values
        values = np.where(better, cap_vals, values)
        family = np.where(better, FAMILY_CAP, family)
        class_lip = max(class_lip, 1.0 / zstar)

    ann_inner = None
    if cfg.get("annuli", False):
        # Conservative over inter-node gaps: the patch decreases outward, so on
        # [r_i, r_{i+1}] its value is at least the value at r_{i+1}, while the
        # gain is bounded by the larger endpoint.
        psi_shift = np.concatenate([psi[1:], [0.0]])
        g_hull = np.maximum(gvals, np.concatenate([gvals[1:], [0.0]]))
        with np.errstate(divide="ignore"):
            bound = np.where(g_hull > 1e-14, gstar * psi_shift / np.maximum(g_hull, 1e-300),
                             np.inf)
        suffix = np.minimum.accumulate(bound[::-1])[::-1]
        feasible = psi <= suffix * (1.0 + 1e-12)
        feasible[-1] = False  # inner radius 1 leaves no annulus
        if feasible.any():
            j0 = int(np.argmax(feasible))  # smallest feasible inner radius
            ann_inner = float(radii[j0])
            with np.errstate(invalid="ignore"):
                ann_vals = np.where(np.arange(K) >= j0, gstar * psi / psi[j0], np.inf)
            better = ann_vals < values
            values = np.where(better, ann_vals, values)
            family = np.where(better, FAMILY_ANNULUS, family)
            index = np.where(better, j0, index)
            if d == 2:
                class_lip = max(class_lip, gstar / (np.log(1.0 / ann_inner) * ann_inner))
            else:
                p = 2.0 - d
                class_lip = max(class_lip,
                                gstar * abs(p) * ann_inner ** (p - 1.0) / abs(1.0 - ann_inner ** p))

    values = np.maximum(values, gvals)  # dictionary patches clear the gain; kill rounding slack
    fld = radial_field(radii, values, tag="unbranched-envelope", dim=d)
    return EnvelopeRun(field=fld, gain=gain, family=family, index=index,
                       zstar=float(zstar) if zstar is not None else np.inf,
                       zstar_by_dir=None, directions=None,
                       annulus_inner=ann_inner, class_lipschitz=float(class_lip))


def _envelope_cartesian(gain: GainField, n: int, cfg: dict) -> EnvelopeRun:
    coords, spacing = cartesian_grid(n)
    inside = np.linalg.norm(coords, axis=-1) < 1.0
    pts = coords.reshape(-1, 2)
    gvals = gain(pts).reshape(n, n)
    gstar = gain.gstar
    gbar = gain.max_gain

    values = np.full((n, n), gbar)
    family = np.full((n, n), FAMILY_CONSTANT, dtype=int)
    index = np.zeros((n, n), dtype=int)
    class_lip = 0.0

    n_dirs = int(cfg.get("cap_directions", 256))
    zstar_by_dir = None
    dirs = None
    if cfg.get("caps", True):
        angles = 2.0 * np.pi * np.arange(n_dirs) / n_dirs
        dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)
        support = inside & (gvals > 1e-14)
        sp_pts = coords[support]
        sp_g = gvals[support]
        zstar_by_dir = np.empty(n_dirs)
        flat = pts
        for k in range(n_dirs):
            p = sp_pts @ dirs[k]
            zstar_by_dir[k] = np.min((1.0 - p) / sp_g)
            cap_vals = (1.0 - flat @ dirs[k]) / zstar_by_dir[k]
            cap_vals = np.where(cap_vals <= gstar, cap_vals, np.inf).reshape(n, n)
            better = cap_vals < values
            values = np.where(better, cap_vals, values)
            family = np.where(better, FAMILY_CAP, family)
            index = np.where(better, k, index)
        class_lip = max(class_lip, float(np.max(1.0 / zstar_by_dir)))

    ann_inner = None
    if cfg.get("annuli", False) and gain.radial:
        fine = np.exp(np.linspace(np.log(1e-3), 0.0, 2048))
        fine[-1] = 1.0
        gf = gain.profile(fine)
        psi_f = scale_coordinate(1.0, 2) - scale_coordinate(fine, 2)
        with np.errstate(divide="ignore"):
            bound = np.where(gf > 1e-14, gstar * psi_f / np.maximum(gf, 1e-300), np.inf)
        suffix = np.minimum.accumulate(bound[::-1])[::-1]
        feasible = psi_f <= suffix * (1.0 + 1e-12)
        feasible[-1] = False
        if feasible.any():
            j0 = int(np.argmax(feasible))
            ann_inner = float(fine[j0])
            radii_nodes = np.linalg.norm(coords, axis=-1)
            with np.errstate(divide="ignore", invalid="ignore"):
                psi_nodes = scale_coordinate(1.0, 2) - scale_coordinate(
                    np.clip(radii_nodes, 1e-12, None), 2)
                ann_vals = np.where(radii_nodes >= ann_inner,
                                    gstar * psi_nodes / psi_f[j0], np.inf)
            better = ann_vals < values
            values = np.where(better, ann_vals, values)
            family = np.where(better, FAMILY_ANNULUS, family)
            class_lip = max(class_lip, gstar / (np.log(1.0 / ann_inner) * ann_inner))

    values = np.maximum(values, gvals)
    values[~inside] = 0.0
    fld = cartesian_field(n, values, tag="unbranched-envelope")
    return EnvelopeRun(field=fld, gain=gain, family=family, index=index,
                       zstar=float(np.min(zstar_by_dir)) if zstar_by_dir is not None else np.inf,
                       zstar_by_dir=zstar_by_dir, directions=dirs,
                       annulus_inner=ann_inner, class_lipschitz=float(class_lip))


# ---------------------------------------------------------------------------
# Balayage (plain harmonic replacement) and obstacle-respecting refinement
# ---------------------------------------------------------------------------

def balayage_step(w: GridField, contact: ContactSet, gain: GainField,
                  omega: float = 1.9, max_sweeps: int = 200_000) -> GridField:
    """Harmonic replacement of w on each non-contact component, clipped above by w.

    This realises the expected gain at the first exit from the non-contact
    set; it may drop below the gain (spiked gains do), which is precisely the
    failure of unbranched envelopes the refinement scheme repairs.
    """
    if w.kind == "radial":
        out = w.values.copy()
        s = w.scale
        for i0, i1 in _runs(contact.noncontact_mask):
            left = None if i0 == 0 else w.values[i0 - 1]
            right = w.values[i1 + 1] if i1 + 1 < len(out) else 0.0
            s_l = s[i0 - 1] if i0 > 0 else s[0]
            s_r = s[i1 + 1] if i1 + 1 < len(out) else s[-1]
            if left is None:
                out[i0:i1 + 1] = right
            else:
                t = (s[i0:i1 + 1] - s_l) / (s_r - s_l)
                out[i0:i1 + 1] = left + (right - left) * t
        out = np.minimum(out, w.values)
        return w.copy_with(out, tag="balayage")
    out = w.values.copy()
    arms = _arms(w)
    for label in range(1, contact.n_components + 1):
        comp = contact.labels == label
        _relax_component(out, comp, arms, obstacle=None, omega=omega,
                         tol=RELAX_TOL, max_sweeps=max_sweeps)
    out = np.minimum(out, w.values)
    return w.copy_with(out, tag="balayage")


def envelope_step(w: GridField, contact: ContactSet, gain: GainField,
                  omega: float = 1.9, max_sweeps: int = 200_000) -> GridField:
    """Obstacle-respecting replacement on each non-contact component, min with w.

    Where the plain interpolant stays above the gain this is exactly the
    log/power interpolation; where it would dip below, the replacement rides
    the gain, which keeps every iterate a majorant.
    """
    gvals = gain_on_grid(gain, w)
    out = w.values.copy()
    if w.kind == "radial":
        s = w.scale
        for i0, i1 in _runs(contact.noncontact_mask):
            left = None if i0 == 0 else w.values[i0 - 1]
            right = w.values[i1 + 1] if i1 + 1 < len(out) else 0.0
            s_l = s[i0 - 1] if i0 > 0 else None
            s_r = s[i1 + 1] if i1 + 1 < len(out) else s[-1]
            seg = _segment_obstacle_solve(s[i0:i1 + 1], gvals[i0:i1 + 1],
                                          left, right, s_l, s_r)
            out[i0:i1 + 1] = seg
    else:
        arms = _arms(w)
        for label in range(1, contact.n_components + 1):
            comp = contact.labels == label
            _relax_component(out, comp, arms, obstacle=gvals, omega=omega,
                             tol=RELAX_TOL, max_sweeps=max_sweeps)
    out = np.minimum(out, w.values)
    return w.copy_with(out, tag="envelope")


def _segment_obstacle_solve(s: np.ndarray, phi: np.ndarray, left: float | None,
                            right: float, s_left: float | None, s_right: float,
                            max_cycles: int = 2000) -> np.ndarray:
    """Smallest concave-in-s majorant of phi with pinned ends on one component.

    Active nodes sit on the obstacle; inactive stretches interpolate affinely
    in s (exact harmonic interpolation per interval).  A left pin of None is
    the bounded-at-the-origin condition: stretches touching the left edge are
    constant.  Activate/release cycles implement the complementarity system.
    """
    m = len(s)
    active = np.zeros(m, dtype=bool)
    u = np.empty(m)
    for _ in range(max_cycles):
        _interpolate_runs(u, s, phi, active, left, right, s_left, s_right)
        viol = (phi - u) > 1e-13
        if viol.any():
            active |= viol
            continue
        release = _convex_kinks(u, s, active, left, right, s_left, s_right)
        if release.any():
            active &= ~release
            continue
        return u
    raise ConvergenceError("segment obstacle solve did not settle",
                           float(np.max(np.abs(phi - u))))


def _interpolate_runs(u: np.ndarray, s: np.ndarray, phi: np.ndarray, active: np.ndarray,
                      left: float | None, right: float, s_left: float | None,
                      s_right: float) -> None:
    m = len(s)
    u[active] = phi[active]
    for i0, i1 in _runs(~active):
        lv = phi[i0 - 1] if i0 > 0 else left
        ls = s[i0 - 1] if i0 > 0 else s_left
        rv = phi[i1 + 1] if i1 + 1 < m else right
        rs = s[i1 + 1] if i1 + 1 < m else s_right
        if lv is None:
            u[i0:i1 + 1] = rv
        else:
            t = (s[i0:i1 + 1] - ls) / (rs - ls)
            u[i0:i1 + 1] = lv + (rv - lv) * t


def _convex_kinks(u: np.ndarray, s: np.ndarray, active: np.ndarray, left: float | None,
                  right: float, s_left: float | None, s_right: float) -> np.ndarray:
    """Active nodes violating discrete superharmonicity (value below neighbour chord)."""
    m = len(s)
    release = np.zeros(m, dtype=bool)
    idx = np.nonzero(active)[0]
    for i in idx:
        if i == 0:
            if left is None:
                # Bounded-at-origin condition: flat continuation to the left.
                chord = u[1] if m > 1 else right
            else:
                ls, lv = s_left, left
                rs, rv = (s[1], u[1]) if m > 1 else (s_right, right)
                chord = lv + (rv - lv) * (s[0] - ls) / (rs - ls)
        elif i == m - 1:
            ls, lv = s[m - 2], u[m - 2]
            chord = lv + (right - lv) * (s[i] - ls) / (s_right - ls)
        else:
            ls, lv = s[i - 1], u[i - 1]
            rs, rv = s[i + 1], u[i + 1]
            chord = lv + (rv - lv) * (s[i] - ls) / (rs - ls)
        if u[i] < chord - 1e-13:
            release[i] = True
    return release


# Cartesian relaxation with cut-cell boundary arms -------------------------

_ARM_CACHE: dict[int, dict] = {}


def _arms(w: GridField) -> dict:
    key = id(w.coords)
    hit = _ARM_CACHE.get(key)
    if hit is not None:
        return hit
    coords = w.coords
    inside = w.inside
    n = coords.shape[0]
    sp = w.spacing
    thetas = {}
    nbr_inside = {}
    offsets = {"E": (1, 0), "W": (-1, 0), "N": (0, 1), "S": (0, -1)}
    for name, (di, dj) in offsets.items():
        theta = np.ones((n, n))
        nin = np.zeros((n, n), dtype=bool)
        src_i = np.clip(np.arange(n)[:, None] + di, 0, n - 1)
        src_j = np.clip(np.arange(n)[None, :] + dj, 0, n - 1)
        nin = inside[src_i, src_j] & inside
        cut = inside & ~inside[src_i, src_j]
        if cut.any():
            p = coords[cut]
            e = np.array([di, dj], dtype=float)
            a = sp * sp
            b = 2.0 * sp * (p @ e)
            c = np.sum(p * p, axis=1) - 1.0
            disc = np.sqrt(np.maximum(b * b - 4 * a * c, 0.0))
            t = (-b + disc) / (2 * a)
            theta[cut] = np.clip(t, 1e-6, 1.0)
        thetas[name] = theta
        nbr_inside[name] = nin
    out = {"thetas": thetas, "nbr_inside": nbr_inside}
    _ARM_CACHE[key] = out
    if len(_ARM_CACHE) > 16:
        _ARM_CACHE.pop(next(iter(_ARM_CACHE)))
    return out


def _relax_component(values: np.ndarray, comp: np.ndarray, arms: dict,
                     obstacle: np.ndarray | None, omega: float, tol: float,
                     max_sweeps: int) -> None:
    """(Projected) SOR on one component; values is updated in place.

    Nodes off the component act as Dirichlet data; neighbours outside the
    disc contribute zero through shortened cut-cell arms.
    """
    ii, jj = np.nonzero(comp)
    if ii.size == 0:
        return
    te = arms["thetas"]["E"][comp]
    tw = arms["thetas"]["W"][comp]
    tn = arms["thetas"]["N"][comp]
    ts = arms["thetas"]["S"][comp]
    ae = 2.0 / (te * (te + tw))
    aw = 2.0 / (tw * (te + tw))
    an = 2.0 / (tn * (tn + ts))
    a_s = 2.0 / (ts * (tn + ts))
    diag = 2.0 / (te * tw) + 2.0 / (tn * ts)
    ne = arms["nbr_inside"]["E"][comp]
    nw = arms["nbr_inside"]["W"][comp]
    nn = arms["nbr_inside"]["N"][comp]
    ns = arms["nbr_inside"]["S"][comp]
    phi = obstacle[comp] if obstacle is not None else None
    red = ((ii + jj) % 2 == 0)
    scale = float(np.max(np.abs(values))) + 1.0

    for sweep in range(max_sweeps):
        biggest = 0.0
        for color in (red, ~red):
            if not color.any():
                continue
            ci, cj = ii[color], jj[color]
            s = np.zeros(ci.size)
            s += np.where(ne[color], values[np.minimum(ci + 1, values.shape[0] - 1), cj], 0.0) * ae[color]
            s += np.where(nw[color], values[np.maximum(ci - 1, 0), cj], 0.0) * aw[color]
            s += np.where(nn[color], values[ci, np.minimum(cj + 1, values.shape[1] - 1)], 0.0) * an[color]
            s += np.where(ns[color], values[ci, np.maximum(cj - 1, 0)], 0.0) * a_s[color]
            gs = s / diag[color]
            new = (1.0 - omega) * values[ci, cj] + omega * gs
            if phi is not None:
                new = np.maximum(phi[color], new)
            biggest = max(biggest, float(np.max(np.abs(new - values[ci, cj]))))
            values[ci, cj] = new
        if biggest < tol * scale:
            return
    raise ConvergenceError("component relaxation hit the sweep limit", biggest)


# ---------------------------------------------------------------------------
# Iterated refinement
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class EnvelopeSequence:
    levels: list
    contacts: list
    converged: bool
    summary: list
    run: Optional[EnvelopeRun] = None
    gain: Optional[GainField] = None


def iterate_envelopes(gain: GainField, start, max_iter: int = 32, tol: float = 1e-9,
                      contact_tol: float = CONTACT_TOL, omega: float = 1.9) -> EnvelopeSequence:
    """Monotone refinement along decreasing non-contact sets.

    Each level replaces the previous one on its non-contact components and is
    clipped by it, so levels decrease nodewise and the non-contact sets nest.
    Stops when the sup change drops below tol.
    """
    run = start if isinstance(start, EnvelopeRun) else None
    w = start.field if isinstance(start, EnvelopeRun) else start
    gvals = gain_on_grid(gain, w)
    levels = [w]
    contacts = [contact_set(w, gain, contact_tol)]
    summary = [_level_summary(0, np.inf, contacts[0])]
    converged = False
    for level in range(1, max_iter + 1):
        nxt = envelope_step(levels[-1], contacts[-1], gain, omega=omega)
        nxt.values = np.minimum(nxt.values, levels[-1].values)
        nxt.values = np.maximum(nxt.values, np.minimum(gvals, levels[-1].values))
        nxt.tag = f"envelope-level-{level}"
        change = float(np.max(np.abs(nxt.values - levels[-1].values)))
        levels.append(nxt)
        contacts.append(contact_set(nxt, gain, contact_tol))
        summary.append(_level_summary(level, change, contacts[-1]))
        if change < tol:
            converged = True
            break
    return EnvelopeSequence(levels=levels, contacts=contacts, converged=converged,
                            summary=summary, run=run, gain=gain)


def _level_summary(level: int, sup_change: float, contact: ContactSet) -> dict:
    return {
        "level": level,
        "sup_change": None if not np.isfinite(sup_change) else sup_change,
        "noncontact_cells": int(contact.noncontact_mask.sum()),
        "components": contact.n_components,
    }


# ---------------------------------------------------------------------------
# Branched witnesses
# ---------------------------------------------------------------------------

def build_branched_witness(seq: EnvelopeSequence, level: int, x,
                           shrink: float | None = None) -> BranchedMajorant:
    """Realise the level's refinement at x as an explicit branched majorant.

    The base patch carries the level's field as boundary data on a smooth
    inner approximation of the NEXT level's non-contact component: there the
    next level is harmonic with smaller boundary data, so the base dominates
    it (hence the gain) while matching its value up to the reported error.
    Interior boundary points extend to dictionary patches achieving the
    unbranched envelope.
    """
    if not 0 <= level < len(seq.levels):
        raise EnvelopeError(f"level {level} outside the computed sequence")
    fld = seq.levels[level]
    nxt_idx = min(level + 1, len(seq.levels) - 1)
    nxt = seq.levels[nxt_idx]
    contact = seq.contacts[nxt_idx]
    gain = seq.gain
    run = seq.run
    if run is None:
        raise EnvelopeError("witness construction needs the dictionary run")
    x = np.asarray(x, dtype=float)

    leaf_cache: dict[int, BranchedMajorant] = {}

    def query(u: np.ndarray) -> BranchedMajorant:
        patch = run.best_patch(u)
        key = id(patch)
        if key not in leaf_cache:
            leaf_cache[key] = leaf(patch)
        return leaf_cache[key]

    if fld.kind == "radial":
        r = float(np.linalg.norm(x))
        i = int(np.argmin(np.abs(fld.radii - r)))
        if contact.labels[i] == 0:
            raise NoWitnessError(f"point at radius {r:.4g} lies in the contact set")
        label = contact.labels[i]
        nodes = np.nonzero(contact.labels == label)[0]
        i0, i1 = int(nodes[0]), int(nodes[-1])
        if shrink is None:
            shrink = 2.0 * (fld.radii[min(i1 + 1, len(fld.radii) - 1)] - fld.radii[i1])
        inner = float(fld.radii[i0]) + shrink
        touches_sphere = (i1 + 1 >= len(fld.radii) - 1) or fld.radii[i1 + 1] >= 1.0 - 1e-12
        outer = 1.0 if touches_sphere else float(fld.radii[i1]) - shrink
        if not inner < r < outer:
            raise NoWitnessError("point too close to the component boundary for the shrink width")
        va = float(fld.interpolate(inner))
        vb = 0.0 if touches_sphere else float(fld.interpolate(outer))
        base = annulus_patch(inner, outer, va, vb, gain.gstar, dim=gain.dim,
                             label=f"witness-annulus[{inner:.4g},{outer:.4g}]")
        sel = (fld.radii > inner) & (fld.radii < outer)
        base_profile = np.atleast_1d(base.value(
            np.stack([fld.radii[sel], np.zeros(sel.sum())], axis=1)))
        value_gap = float(np.max(np.abs(base_profile - nxt.values[sel]))) if sel.any() else 0.0
        err = _interface_error(base, query) + value_gap + run.class_lipschitz * shrink
        return branched(base, query, depth=max(2, level + 2), error_bound=err)

    # Cartesian: smooth inner approximation of the component mask.
    i = _nearest_node(fld, x)
    if contact.labels[i] == 0:
        raise NoWitnessError(f"point {x} lies in the contact set")
    label = contact.labels[i]
    comp_mask = contact.labels == label
    region = GridRegion(mask=comp_mask, spacing=fld.spacing)
    from .geometry import smooth_inner_approximation
    from .harmonic import BoundaryData, WosConfig
    from .majorant import ball_patch, grid_patch
    if shrink is None:
        shrink = 6.0 * fld.spacing  # room for the grid mollifier at this resolution
    dom = smooth_inner_approximation(region, shrink)
    data = BoundaryData(evaluator=lambda pts: np.asarray(fld.interpolate(pts)))
    if isinstance(dom, Ball):
        base = ball_patch(dom.center, dom.radius, data, gain.gstar)
    elif isinstance(dom, Annulus):
        va = float(fld.interpolate(np.array([dom.inner, 0.0]) + np.asarray(dom.center)))
        vb = float(fld.interpolate(np.array([dom.outer, 0.0]) + np.asarray(dom.center)))
        base = annulus_patch(dom.inner, dom.outer, va, vb, gain.gstar)
    else:
        base = grid_patch(dom, data, gain.gstar, WosConfig(walks=4000, seed=11),
                          lipschitz_bound=run.class_lipschitz, label="witness-grid")
    probe_idx = np.argwhere(comp_mask)[:: max(1, comp_mask.sum() // 12)]
    gaps = []
    for pi, pj in probe_idx:
        p = fld.coords[pi, pj]
        bv = float(base.value(p))
        if np.isfinite(bv):
            gaps.append(abs(bv - float(nxt.values[pi, pj])))
    value_gap = max(gaps) if gaps else 0.0
    err = _interface_error(base, query) + value_gap + run.class_lipschitz * shrink
    return branched(base, query, depth=max(2, level + 2), error_bound=err)


def _nearest_node(fld: GridField, x: np.ndarray) -> tuple[int, int]:
    sp = fld.spacing
    lo = fld.coords[0, 0]
    n = fld.values.shape[0]
    i = int(np.clip(round((x[0] - lo[0]) / sp), 0, n - 1))
    j = int(np.clip(round((x[1] - lo[1]) / sp), 0, n - 1))
    return (i, j)


def _interface_error(base: HarmonicPatch, query) -> float:
    """Measured value mismatch between the base data and its children."""
    from .majorant import interior_boundary_samples

    tmp = BranchedMajorant(base=base, extension=ExtensionMap(query=query),
                           depth=2, error_bound=float("inf"))
    pts = interior_boundary_samples(tmp, 64)
    delta = 0.0
    for p in pts:
        child = query(p)
        cv = float(child.value(p))
        if not np.isfinite(cv):
            raise MajorantError("witness extension misses its query point")
        delta = max(delta, abs(float(base.boundary_value(p)) - cv))
    return delta
