"""Radial and Cartesian grid helpers shared by the envelope and oracle modules."""

from __future__ import annotations

import numpy as np


def scale_coordinate(r: np.ndarray | float, d: int) -> np.ndarray | float:
    """Coordinate in which radial harmonic functions are affine.

    ``ln r`` in dimension 2, ``-r**(2-d)`` for d >= 3 (sign chosen so the
    coordinate is increasing in r in every dimension).
    """
    if d == 2:
        return np.log(r)
    return -np.power(r, 2 - d)


def radial_grid(n: int = 2048, r_min: float = 1e-3) -> np.ndarray:
    """Log-uniform radii on (r_min, 1], last node exactly 1.

    Uniform spacing in the scale coordinate makes per-interval harmonic
    interpolation exact in d = 2.
    """
    if n < 2:
        raise ValueError("radial grid needs at least 2 nodes")
    if not 0.0 < r_min < 1.0:
        raise ValueError("r_min must lie in (0, 1)")
    radii = np.exp(np.linspace(np.log(r_min), 0.0, n))
    radii[-1] = 1.0
    return radii


def cartesian_grid(n: int = 257) -> tuple[np.ndarray, float]:
    """Node coordinates of an n-by-n grid covering [-1, 1]^2.

    Returns (coords, spacing) where coords has shape (n, n, 2), index [i, j]
    holding (x_i, y_j).
    """
    if n < 3:
        raise ValueError("cartesian grid needs at least 3 nodes per side")
    axis = np.linspace(-1.0, 1.0, n)
    spacing = axis[1] - axis[0]
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([xx, yy], axis=-1), spacing
