"""Independent ground-truth solvers for the stopping value function.

Two routes that share nothing with the envelope pipeline: the classical
one-dimensional reduction (smallest concave majorant of the radial profile in
the scale coordinate, built by a monotone-chain hull) and a projected-SOR
solve of the discrete obstacle complementarity system on a disc-masked grid.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .envelope import GridField, cartesian_field
from .gain import GainField
from .grids import cartesian_grid, scale_coordinate


class OracleError(ValueError):
    pass


class OracleConvergenceError(OracleError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(eq=False)
class RadialProfile:
    """Values on an increasing radius grid ending at the unit sphere."""

    radii: np.ndarray
    values: np.ndarray
    scale: np.ndarray
    dim: int
    value_at_origin: float = 0.0

    def __post_init__(self):
        if np.any(np.diff(self.radii) <= 0.0):
            raise OracleError("radii must be strictly increasing")
        if abs(self.radii[-1] - 1.0) > 1e-12:
            raise OracleError("last radius must be 1")

    def interpolate(self, r) -> float | np.ndarray:
        rr = np.asarray(r, dtype=float)
        single = rr.ndim == 0
        rr = np.clip(np.atleast_1d(rr), self.radii[0], 1.0)
        out = np.interp(scale_coordinate(rr, self.dim), self.scale, self.values)
        return float(out[0]) if single else out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write("# units: r in unit-ball lengths, value in payoff units\n")
            writer = csv.writer(fh)
            writer.writerow(["r", "value"])
            for r, v in zip(self.radii, self.values):
                writer.writerow([f"{r:.12g}", f"{v:.12g}"])


# ---------------------------------------------------------------------------
# Radial concave-majorant oracle
# ---------------------------------------------------------------------------

def upper_concave_hull(xs: np.ndarray, ys: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vertices of the upper concave hull of the point set (xs increasing)."""
    hx: list[float] = []
    hy: list[float] = []
    for x, y in zip(xs, ys):
        while len(hx) >= 2:
            cross = (hx[-1] - hx[-2]) * (y - hy[-2]) - (hy[-1] - hy[-2]) * (x - hx[-2])
            if cross >= 0.0:
                hx.pop()
                hy.pop()
            else:
                break
        hx.append(float(x))
        hy.append(float(y))
    return np.asarray(hx), np.asarray(hy)


def radial_value_oracle(gain: GainField, d: int, radii: np.ndarray,
                        anchor_gap: float = 50.0) -> RadialProfile:
    """Value function of the radial problem via the smallest concave majorant.

    Works in the scale coordinate, where radial harmonic functions are affine.
    The left tail is handled by a far-left anchor at the global profile
    maximum: below the peak radius every sphere is hit almost surely before
    absorption, so the value is flat at that maximum.  The unit-sphere node
    pins the hull at zero.
    """
    if not gain.radial:
        raise OracleError("radial oracle needs a radial gain")
    if d not in (2, 3):
        raise OracleError("radial oracle supports d = 2 and d = 3")
    radii = np.asarray(radii, dtype=float)
    if abs(radii[-1] - 1.0) > 1e-12:
        raise OracleError("radius grid must end at 1")
    prof = gain.profile(radii)
    prof = np.clip(prof, 0.0, None)
    s = scale_coordinate(radii, d)

    peak = float(prof.max())
    if d == 2:
        s_anchor = s[0] - anchor_gap
    else:
        # In d >= 3 the scale coordinate is bounded below by -inf as well
        # (s = -r**(2-d) -> -inf as r -> 0), so a plain gap works the same way.
        s_anchor = s[0] - anchor_gap * max(1.0, abs(s[0]))
    xs = np.concatenate([[s_anchor], s])
    ys = np.concatenate([[peak], prof])
    hx, hy = upper_concave_hull(xs, ys)
    vals = np.interp(s, hx, hy)
    vals = np.maximum(vals, prof)
    g0 = float(gain.profile(np.array([0.0]))[0])
    return RadialProfile(radii=radii, values=vals, scale=s, dim=d,
                         value_at_origin=max(g0, float(vals[0])))


# ---------------------------------------------------------------------------
# Projected SOR obstacle solver on the disc
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class DiscStencil:
    """Shortley-Weller 5-point stencil on the disc-masked grid."""

    inside: np.ndarray
    coeffs: dict
    diag: np.ndarray
    nbr_inside: dict


def _disc_stencil(coords: np.ndarray, spacing: float) -> DiscStencil:
    n = coords.shape[0]
    inside = np.linalg.norm(coords, axis=-1) < 1.0
    coeffs = {}
    nbr_inside = {}
    thetas = {}
    for name, (di, dj) in {"E": (1, 0), "W": (-1, 0), "N": (0, 1), "S": (0, -1)}.items():
        src_i = np.clip(np.arange(n)[:, None] + di, 0, n - 1)
        src_j = np.clip(np.arange(n)[None, :] + dj, 0, n - 1)
        nin = inside[src_i, src_j] & inside
        theta = np.ones((n, n))
        cut = inside & ~inside[src_i, src_j]
        if cut.any():
            p = coords[cut]
            e = np.array([di, dj], dtype=float)
            a = spacing * spacing
            b = 2.0 * spacing * (p @ e)
            c = np.sum(p * p, axis=1) - 1.0
            disc = np.sqrt(np.maximum(b * b - 4.0 * a * c, 0.0))
            theta[cut] = np.clip((-b + disc) / (2.0 * a), 1e-6, 1.0)
        thetas[name] = theta
        nbr_inside[name] = nin
    coeffs["E"] = 2.0 / (thetas["E"] * (thetas["E"] + thetas["W"]))
    coeffs["W"] = 2.0 / (thetas["W"] * (thetas["E"] + thetas["W"]))
    coeffs["N"] = 2.0 / (thetas["N"] * (thetas["N"] + thetas["S"]))
    coeffs["S"] = 2.0 / (thetas["S"] * (thetas["N"] + thetas["S"]))
    diag = 2.0 / (thetas["E"] * thetas["W"]) + 2.0 / (thetas["N"] * thetas["S"])
    return DiscStencil(inside=inside, coeffs=coeffs, diag=diag, nbr_inside=nbr_inside)


def neg_laplacian(u: np.ndarray, stencil: DiscStencil, spacing: float) -> np.ndarray:
    """-(discrete Laplacian) with cut-cell arms; zero off the disc."""
    out = np.zeros_like(u)
    n = u.shape[0]
    acc = stencil.diag * u
    for name, (di, dj) in {"E": (1, 0), "W": (-1, 0), "N": (0, 1), "S": (0, -1)}.items():
        src_i = np.clip(np.arange(n)[:, None] + di, 0, n - 1)
        src_j = np.clip(np.arange(n)[None, :] + dj, 0, n - 1)
        nbr = np.where(stencil.nbr_inside[name], u[src_i, src_j], 0.0)
        acc = acc - stencil.coeffs[name] * nbr
    out[stencil.inside] = acc[stencil.inside] / (spacing * spacing)
    return out


def psor_obstacle_solve(gain: GainField, n: int = 257, omega: float = 1.7,
                        tol: float = 1e-8, max_iter: int = 300_000,
                        check_every: int = 50) -> GridField:
    """Solve min(-lap u, u - g) = 0 on the disc with u = 0 at the unit circle.

    Red-black projected SOR on a Shortley-Weller cut-cell stencil; nodes
    outside the disc are Dirichlet zero.  Stops when the complementarity
    residual max |min(-lap u, u - g)| falls below tol.
    """
    if gain.dim != 2:
        raise OracleError("the obstacle solver works on d = 2 grids")
    if not 0.0 < omega < 2.0:
        raise OracleError("relaxation factor must lie in (0, 2)")
    coords, spacing = cartesian_grid(n)
    stencil = _disc_stencil(coords, spacing)
    inside = stencil.inside
    phi = gain(coords.reshape(-1, 2)).reshape(n, n)
    phi = np.where(inside, phi, 0.0)
    u = np.maximum(phi, 0.0)
    u[~inside] = 0.0

    ii, jj = np.nonzero(inside)
    colors = [(ii[(ii + jj) % 2 == 0], jj[(ii + jj) % 2 == 0]),
              (ii[(ii + jj) % 2 == 1], jj[(ii + jj) % 2 == 1])]
    pre = []
    for ci, cj in colors:
        pre.append({
            "ci": ci, "cj": cj,
            "ae": stencil.coeffs["E"][ci, cj], "aw": stencil.coeffs["W"][ci, cj],
            "an": stencil.coeffs["N"][ci, cj], "as": stencil.coeffs["S"][ci, cj],
            "ne": stencil.nbr_inside["E"][ci, cj], "nw": stencil.nbr_inside["W"][ci, cj],
            "nn": stencil.nbr_inside["N"][ci, cj], "ns": stencil.nbr_inside["S"][ci, cj],
            "diag": stencil.diag[ci, cj], "phi": phi[ci, cj],
            "ci_e": np.minimum(ci + 1, n - 1), "ci_w": np.maximum(ci - 1, 0),
            "cj_n": np.minimum(cj + 1, n - 1), "cj_s": np.maximum(cj - 1, 0),
        })

    residual = np.inf
    for sweep in range(max_iter):
        for c in pre:
            s = (np.where(c["ne"], u[c["ci_e"], c["cj"]], 0.0) * c["ae"]
                 + np.where(c["nw"], u[c["ci_w"], c["cj"]], 0.0) * c["aw"]
                 + np.where(c["nn"], u[c["ci"], c["cj_n"]], 0.0) * c["an"]
                 + np.where(c["ns"], u[c["ci"], c["cj_s"]], 0.0) * c["as"])
            gs = s / c["diag"]
            new = np.maximum(c["phi"], (1.0 - omega) * u[c["ci"], c["cj"]] + omega * gs)
            u[c["ci"], c["cj"]] = new
        if (sweep + 1) % check_every == 0:
            neg_lap = neg_laplacian(u, stencil, spacing)
            comp = np.minimum(neg_lap, u - phi)
            residual = float(np.max(np.abs(comp[inside])))
            if residual < tol:
                break
    else:
        raise OracleConvergenceError("projected SOR hit the iteration limit", residual)

    fld = cartesian_field(n, u, tag="psor-oracle")
    return fld


def complementarity_residual(fld: GridField, gain: GainField) -> float:
    """Max over nodes of |min(-lap u, u - g)| for a solver-output field."""
    coords, spacing = fld.coords, fld.spacing
    stencil = _disc_stencil(coords, spacing)
    phi = gain(coords.reshape(-1, 2)).reshape(fld.values.shape)
    neg_lap = neg_laplacian(fld.values, stencil, spacing)
    comp = np.minimum(neg_lap, fld.values - phi)
    return float(np.max(np.abs(comp[stencil.inside])))


# ---------------------------------------------------------------------------
# Cross validation
# ---------------------------------------------------------------------------

def cross_validate(limit: GridField, radial: RadialProfile | None = None,
                   psor: GridField | None = None) -> dict:
    """Sup and L2 distances between the refinement limit and each oracle."""
    report: dict = {}
    if radial is not None:
        if limit.kind == "radial":
            if len(limit.radii) == len(radial.radii) and np.allclose(limit.radii, radial.radii):
                diff = limit.values - radial.values
                interp_err = 0.0
            else:
                diff = limit.values - radial.interpolate(limit.radii)
                interp_err = _interp_error(radial.values)
        else:
            node_r = np.linalg.norm(limit.coords, axis=-1)
            ref = radial.interpolate(np.clip(node_r, radial.radii[0], 1.0))
            ref = np.where(limit.inside, ref, 0.0)
            diff = (limit.values - ref)[limit.inside]
            interp_err = _interp_error(radial.values)
        report["radial"] = _distances(diff, interp_err)
    if psor is not None:
        if limit.kind == "cartesian" and limit.values.shape == psor.values.shape:
            diff = (limit.values - psor.values)[limit.inside]
            interp_err = 0.0
        elif limit.kind == "radial":
            node_r = np.linalg.norm(psor.coords, axis=-1)
            mine = np.interp(scale_coordinate(np.clip(node_r, limit.radii[0], 1.0), limit.dim),
                             scale_coordinate(limit.radii, limit.dim), limit.values)
            diff = (mine - psor.values)[psor.inside]
            interp_err = _interp_error(limit.values)
        else:
            raise OracleError("mismatched grids: resample one side first")
        report["psor"] = _distances(diff, interp_err)
    return report


def _interp_error(values: np.ndarray) -> float:
    if len(values) < 3:
        return 0.0
    return float(np.max(np.abs(np.diff(values, 2))) / 8.0)


def _distances(diff: np.ndarray, interp_err: float) -> dict:
    return {
        "sup": float(np.max(np.abs(diff))),
        "l2": float(np.sqrt(np.mean(diff ** 2))),
        "interpolation_error": interp_err,
    }
