"""Volume3D container and its on-disk format.

A volume is a scalar 3D image on an axis-aligned grid: integer dims
(nx, ny, nz), positive spacing in mm/voxel, and a world origin at voxel
(0, 0, 0). Data is stored as a (nz, ny, nx) float32 array in C order, which
makes the flat layout x-fastest as the file format requires.

On disk a volume is a pair of files sharing a base path: ``<base>.json``
(dims/spacing/origin/dtype/byte_order sidecar) and ``<base>.raw``
(little-endian float32, x-fastest). Read/write round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

__all__ = ["Volume3D", "save_volume", "load_volume"]


@dataclass(frozen=True)
class Volume3D:
    """Scalar 3D image with grid metadata.

    Attributes
    ----------
    data : ndarray, shape (nz, ny, nx), float32
        Intensities; C order so the flat view is x-fastest.
    spacing : tuple of 3 floats
        (sx, sy, sz) in mm per voxel, all > 0.
    origin : tuple of 3 floats
        World position (mm) of voxel (0, 0, 0).
    """

    data: np.ndarray
    spacing: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    _skip_checks: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D (nz, ny, nx), got {data.shape}")
        if data.dtype != np.float32 or not data.flags.c_contiguous:
            data = np.ascontiguousarray(data, dtype=np.float32)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        if len(self.spacing) != 3 or len(self.origin) != 3:
            raise ValueError("spacing and origin must have 3 components")
        if self._skip_checks:
            return
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be positive, got {self.spacing}")
        if any(not np.isfinite(o) for o in self.origin):
            raise ValueError(f"origin must be finite, got {self.origin}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume intensities must all be finite")

    @property
    def dims(self) -> tuple:
        """(nx, ny, nz) voxel counts."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def center(self) -> np.ndarray:
        """World coordinate (mm) of the geometric volume center."""
        d = np.array(self.dims, dtype=np.float64)
        return np.asarray(self.origin) + (d - 1.0) / 2.0 * np.asarray(self.spacing)

    def same_geometry(self, other: "Volume3D") -> bool:
        return (
            self.dims == other.dims
            and self.spacing == other.spacing
            and self.origin == other.origin
        )

    def with_data(self, data: np.ndarray) -> "Volume3D":
        """New volume on this grid with replaced intensities."""
        return Volume3D(data, self.spacing, self.origin)


def save_volume(vol: Volume3D, base_path: str) -> None:
    """Write ``<base>.json`` sidecar and ``<base>.raw`` LE float32 payload."""
    base, ext = os.path.splitext(base_path)
    if ext not in ("", ".json", ".raw"):
        base = base_path
    sidecar = {
        "dims": list(vol.dims),
        "spacing": list(vol.spacing),
        "origin": list(vol.origin),
        "dtype": "f32",
        "byte_order": "little",
        "raw": os.path.basename(base) + ".raw",
    }
    with open(base + ".json", "w") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")
    vol.data.astype("<f4", copy=False).tofile(base + ".raw")


def load_volume(path: str) -> Volume3D:
    """Read a volume from its ``.json`` sidecar (or the shared base path)."""
    base, ext = os.path.splitext(path)
    if ext not in (".json", ".raw"):
        base = path
    with open(base + ".json") as f:
        sidecar = json.load(f)
    if sidecar.get("dtype") != "f32":
        raise ValueError(f"unsupported dtype {sidecar.get('dtype')!r}")
    if sidecar.get("byte_order") != "little":
        raise ValueError(f"unsupported byte order {sidecar.get('byte_order')!r}")
    dims = [int(d) for d in sidecar["dims"]]
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"bad dims in sidecar: {dims}")
    raw_name = sidecar.get("raw", os.path.basename(base) + ".raw")
    raw_path = os.path.join(os.path.dirname(base) or ".", raw_name)
    data = np.fromfile(raw_path, dtype="<f4")
    nx, ny, nz = dims
    if data.size != nx * ny * nz:
        raise ValueError(
            f"raw payload has {data.size} values, sidecar dims imply {nx * ny * nz}"
        )
    return Volume3D(data.reshape(nz, ny, nx), tuple(sidecar["spacing"]), tuple(sidecar["origin"]))
