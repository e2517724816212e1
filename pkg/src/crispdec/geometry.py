"""Label-map geometry: boundary seeds, thin bands, Euclidean distance maps."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

from .fileio import IGNORE

# |phi| value reported when a label map has no boundary at all; consumers
# must mask it out rather than feed it into a loss.
PHI_SENTINEL = 1.0e9


def boundary_seeds(labels: np.ndarray) -> np.ndarray:
    """Pixels whose label differs from any 4-neighbor, both non-IGNORE."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError("boundary_seeds expects a single 2-D label map")
    valid = lab != IGNORE
    seeds = np.zeros(lab.shape, dtype=bool)
    diff_h = (lab[:, 1:] != lab[:, :-1]) & valid[:, 1:] & valid[:, :-1]
    seeds[:, 1:] |= diff_h
    seeds[:, :-1] |= diff_h
    diff_v = (lab[1:, :] != lab[:-1, :]) & valid[1:, :] & valid[:-1, :]
    seeds[1:, :] |= diff_v
    seeds[:-1, :] |= diff_v
    return seeds


def boundary_band(labels: np.ndarray, width_px: int = 2) -> np.ndarray:
    """Class-agnostic band: pixels within Chebyshev distance < width_px of
    a boundary seed. Accepts [H,W] or [N,H,W]; returns the same rank."""
    lab = np.asarray(labels)
    if lab.ndim == 3:
        return np.stack([boundary_band(im, width_px) for im in lab])
    seeds = boundary_seeds(lab)
    if width_px <= 1:
        return seeds.astype(np.uint8)
    r = width_px - 1
    struct = np.ones((2 * r + 1, 2 * r + 1), dtype=bool)
    return ndimage.binary_dilation(seeds, structure=struct).astype(np.uint8)


def _edt_1d_sq(f: np.ndarray) -> np.ndarray:
    """Lower-envelope pass of the exact squared EDT (one row/column)."""
    n = f.shape[0]
    d = np.empty(n)
    v = np.zeros(n, dtype=np.intp)
    z = np.empty(n + 1)
    z[0], z[1] = -np.inf, np.inf
    k = 0
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2 * q - 2 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) ** 2 + f[v[k]]
    return d


def distance_to_set(mask: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from each pixel to the True set (two passes:
    columns then rows of 1-D squared transforms)."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.full(mask.shape, PHI_SENTINEL)
    big = float(mask.size ** 2)
    f = np.where(mask, 0.0, big)
    g = np.apply_along_axis(_edt_1d_sq, 0, f)
    d2 = np.apply_along_axis(_edt_1d_sq, 1, g)
    return np.sqrt(d2)


def signed_distance(labels: np.ndarray) -> np.ndarray:
    """Distance map to the class-boundary set of a single label map.

    For binary maps (labels in {0,1} plus IGNORE) the interior of the
    foreground carries negative sign; multi-class maps are returned
    unsigned, which is all the surface loss consumes. An empty boundary
    set yields PHI_SENTINEL everywhere.
    """
    lab = np.asarray(labels)
    seeds = boundary_seeds(lab)
    phi = distance_to_set(seeds)
    if phi[0, 0] == PHI_SENTINEL:
        return phi
    values = np.unique(lab[lab != IGNORE])
    if values.size <= 2 and np.all(np.isin(values, (0, 1))):
        inside = (lab == 1) & ~seeds
        phi = np.where(inside, -phi, phi)
    return phi
