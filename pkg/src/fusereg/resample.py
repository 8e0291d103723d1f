"""Trilinear pull-resampling of a volume through a rigid transform.

Every output voxel's world point is mapped through the inverse transform into
the moving volume and interpolated trilinearly. Inverse mapping avoids holes.
Samples whose 2x2x2 interpolation cell is not fully inside the source grid
are set to exactly 0 (no partial blending with the fill value), which keeps
every produced intensity inside [min(moving), max(moving)] or exactly 0.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .transforms import IDENTITY4, invert
from .volume import Volume3D

__all__ = ["resample"]


@lru_cache(maxsize=8)
def _index_grid(dims: tuple) -> np.ndarray:
    """(n, 3) float64 array of (ix, iy, iz) voxel indices, x-fastest order."""
    nx, ny, nz = dims
    iz, iy, ix = np.meshgrid(
        np.arange(nz, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nx, dtype=np.float64),
        indexing="ij",
    )
    return np.stack([ix.ravel(), iy.ravel(), iz.ravel()], axis=1)


def resample(moving: Volume3D, transform: np.ndarray, grid: Volume3D) -> Volume3D:
    """Resample ``moving`` through ``transform`` onto ``grid``'s geometry.

    Parameters
    ----------
    moving : Volume3D
        Source intensities.
    transform : (4, 4) ndarray
        Rigid map from moving-volume world coordinates to grid world
        coordinates. Output voxels are pulled through its inverse.
    grid : Volume3D
        Supplies output dims/spacing/origin; its intensities are ignored.

    Returns
    -------
    Volume3D on ``grid``'s geometry. Out-of-bounds samples are 0.
    """
    m = np.asarray(transform, dtype=np.float64)
    if m.shape != (4, 4) or not np.all(np.isfinite(m)):
        raise ValueError("transform must be a finite 4x4 matrix")
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("transform bottom row must be (0, 0, 0, 1)")
    if abs(np.linalg.det(m[:3, :3])) < 1e-12:
        raise ValueError("transform is singular")

    # identity-on-identical-grid must be bit-for-bit
    if np.array_equal(m, IDENTITY4) and grid.same_geometry(moving):
        return Volume3D(moving.data.copy(), moving.spacing, moving.origin, _skip_checks=True)

    inv = invert(m)
    idx = _index_grid(grid.dims)
    world = idx * np.asarray(grid.spacing) + np.asarray(grid.origin)
    src_world = world @ inv[:3, :3].T + inv[:3, 3]
    u = (src_world - np.asarray(moving.origin)) / np.asarray(moving.spacing)

    nx, ny, nz = moving.dims
    hi = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
    inside = np.all(u >= 0.0, axis=1) & np.all(u <= hi, axis=1)

    i0 = np.floor(u).astype(np.int64)
    # a sample exactly on the far face still needs a valid cell
    np.minimum(i0, (hi - 1.0).astype(np.int64), out=i0)
    np.maximum(i0, 0, out=i0)
    f = u - i0

    flat = moving.data.ravel()
    base = (i0[:, 2] * ny + i0[:, 1]) * nx + i0[:, 0]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1.0 - fx, 1.0 - fy, 1.0 - fz

    sx, sy, sz = 1, nx, nx * ny
    out = gz * (
        gy * (gx * flat[base] + fx * flat[base + sx])
        + fy * (gx * flat[base + sy] + fx * flat[base + sy + sx])
    ) + fz * (
        gy * (gx * flat[base + sz] + fx * flat[base + sz + sx])
        + fy * (gx * flat[base + sz + sy] + fx * flat[base + sz + sy + sx])
    )
    out[~inside] = 0.0
    nxg, nyg, nzg = grid.dims
    return Volume3D(
        out.astype(np.float32).reshape(nzg, nyg, nxg),
        grid.spacing,
        grid.origin,
        _skip_checks=True,
    )
