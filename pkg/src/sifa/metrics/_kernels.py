"""Hot loops for surface extraction and nearest-surface distances.

Two implementations with identical results: numba-compiled loops, and a
numpy/scipy path. Set ``SIFA_NUMBA=0`` to force the numpy path (also used
automatically when numba is not importable).
"""

import os

import numpy as np
from scipy import ndimage

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SIFA_NUMBA", "1").lower() not in ("0", "false", "no")


# ---------------------------------------------------------------------------
# numpy path
# ---------------------------------------------------------------------------


def surface_mask_numpy(mask: np.ndarray, check_z: bool = True) -> np.ndarray:
    """Voxels of ``mask`` with at least one face neighbour outside it.

    ``mask`` is a boolean Z x H x W array. Out-of-volume counts as outside.
    With ``check_z=False`` the first axis is ignored (stack of 2D slices).
    """
    m = np.pad(mask, 1, constant_values=False)
    core = m[1:-1, 1:-1, 1:-1]
    interior = core.copy()
    interior &= m[1:-1, :-2, 1:-1] & m[1:-1, 2:, 1:-1]
    interior &= m[1:-1, 1:-1, :-2] & m[1:-1, 1:-1, 2:]
    if check_z:
        interior &= m[:-2, 1:-1, 1:-1] & m[2:, 1:-1, 1:-1]
    return core & ~interior


def nearest_distances_numpy(points: np.ndarray, surface: np.ndarray, spacing: np.ndarray) -> np.ndarray:
    """Euclidean distance from each point (index triples) to the nearest True voxel of ``surface``."""
    if len(points) == 0:
        return np.zeros(0)
    if not surface.any():
        return np.full(len(points), np.inf)
    dist = ndimage.distance_transform_edt(~surface, sampling=spacing)
    return dist[points[:, 0], points[:, 1], points[:, 2]]


# ---------------------------------------------------------------------------
# numba path
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _surface_numba(mask, check_z):
        Z, H, W = mask.shape
        out = np.zeros_like(mask)
        for z in range(Z):
            for y in range(H):
                for x in range(W):
                    if not mask[z, y, x]:
                        continue
                    edge = (
                        y == 0 or y == H - 1 or x == 0 or x == W - 1
                        or not mask[z, y - 1, x] or not mask[z, y + 1, x]
                        or not mask[z, y, x - 1] or not mask[z, y, x + 1]
                    )
                    if not edge and check_z:
                        edge = z == 0 or z == Z - 1 or not mask[z - 1, y, x] or not mask[z + 1, y, x]
                    out[z, y, x] = edge
        return out

    @njit(cache=True)
    def _edt_line(f, s2, out, v, z):
        # exact 1D lower envelope of parabolas s2 * (q - p)^2 + f[p] (Felzenszwalb & Huttenlocher)
        n = f.shape[0]
        k = -1
        for q in range(n):
            if f[q] == np.inf:
                continue
            fq = f[q] + s2 * q * q
            while k >= 0:
                p = v[k]
                sint = (fq - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p))
                if sint <= z[k]:
                    k -= 1
                else:
                    break
            if k < 0:
                k = 0
                z[0] = -np.inf
            else:
                k += 1
                z[k] = sint
            v[k] = q
            z[k + 1] = np.inf
        if k < 0:
            for q in range(n):
                out[q] = np.inf
            return
        j = 0
        for q in range(n):
            while z[j + 1] < q:
                j += 1
            d = q - v[j]
            out[q] = s2 * d * d + f[v[j]]

    @njit(cache=True)
    def _sq_edt_numba(surface, spacing):
        Z, H, W = surface.shape
        g = np.empty((Z, H, W))
        for z in range(Z):
            for y in range(H):
                for x in range(W):
                    g[z, y, x] = 0.0 if surface[z, y, x] else np.inf
        n = max(Z, H, W)
        f = np.empty(n)
        out = np.empty(n)
        v = np.empty(n, dtype=np.int64)
        zz = np.empty(n + 1)
        for axis in range(3):
            s2 = spacing[axis] * spacing[axis]
            if axis == 0:
                for y in range(H):
                    for x in range(W):
                        for i in range(Z):
                            f[i] = g[i, y, x]
                        _edt_line(f[:Z], s2, out[:Z], v, zz)
                        for i in range(Z):
                            g[i, y, x] = out[i]
            elif axis == 1:
                for z in range(Z):
                    for x in range(W):
                        for i in range(H):
                            f[i] = g[z, i, x]
                        _edt_line(f[:H], s2, out[:H], v, zz)
                        for i in range(H):
                            g[z, i, x] = out[i]
            else:
                for z in range(Z):
                    for y in range(H):
                        for i in range(W):
                            f[i] = g[z, y, i]
                        _edt_line(f[:W], s2, out[:W], v, zz)
                        for i in range(W):
                            g[z, y, i] = out[i]
        return g

    def surface_mask_numba(mask: np.ndarray, check_z: bool = True) -> np.ndarray:
        return _surface_numba(np.ascontiguousarray(mask, dtype=np.bool_), check_z)

    def nearest_distances_numba(points: np.ndarray, surface: np.ndarray, spacing: np.ndarray) -> np.ndarray:
        if len(points) == 0:
            return np.zeros(0)
        if not surface.any():
            return np.full(len(points), np.inf)
        sq = _sq_edt_numba(np.ascontiguousarray(surface, dtype=np.bool_), np.asarray(spacing, dtype=np.float64))
        return np.sqrt(sq[points[:, 0], points[:, 1], points[:, 2]])

def surface_mask(mask: np.ndarray, check_z: bool = True) -> np.ndarray:
    if USE_NUMBA:
        return surface_mask_numba(mask, check_z)
    return surface_mask_numpy(mask, check_z)


def nearest_distances(points: np.ndarray, surface: np.ndarray, spacing) -> np.ndarray:
    spacing = np.asarray(spacing, dtype=np.float64)
    if USE_NUMBA:
        return nearest_distances_numba(points, surface, spacing)
    return nearest_distances_numpy(points, surface, spacing)
