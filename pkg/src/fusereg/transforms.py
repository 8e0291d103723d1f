"""Rigid 6-DOF transforms and the surface-point registration error.

Parameters follow the (tx, ty, tz, rx, ry, rz) convention: translations in
mm, rotations in degrees, applied intrinsically in Z-Y-X order about a
stated center point (the volume center by default elsewhere in the package).
The full matrix is T(center) @ T(t) @ Rz @ Ry @ Rx @ T(-center).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "RigidParams",
    "rigid_matrix",
    "compose",
    "invert",
    "apply_transform",
    "is_rigid",
    "tre",
]

IDENTITY4 = np.eye(4, dtype=np.float64)


@dataclass(frozen=True)
class RigidParams:
    """Six rigid registration parameters: mm translations, degree rotations."""

    tx: float = 0.0
    ty: float = 0.0
    tz: float = 0.0
    rx: float = 0.0
    ry: float = 0.0
    rz: float = 0.0

    def __post_init__(self):
        vals = (self.tx, self.ty, self.tz, self.rx, self.ry, self.rz)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"rigid parameters must be finite, got {vals}")

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.tx, self.ty, self.tz, self.rx, self.ry, self.rz], dtype=np.float64
        )

    @staticmethod
    def from_array(x) -> "RigidParams":
        x = np.asarray(x, dtype=np.float64).reshape(6)
        return RigidParams(*(float(v) for v in x))

    @property
    def is_identity(self) -> bool:
        return not any(self.as_array())


def _rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    m = np.eye(4)
    m[1, 1], m[1, 2] = c, -s
    m[2, 1], m[2, 2] = s, c
    return m


def _rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    m = np.eye(4)
    m[0, 0], m[0, 2] = c, s
    m[2, 0], m[2, 2] = -s, c
    return m


def _rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    m = np.eye(4)
    m[0, 0], m[0, 1] = c, -s
    m[1, 0], m[1, 1] = s, c
    return m


def _trans(t) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = t
    return m


def rigid_matrix(params: RigidParams, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Build the 4x4 homogeneous matrix for ``params`` about ``center``.

    Parameters
    ----------
    params : RigidParams
        Translations in mm, rotations in degrees.
    center : 3-sequence of float
        World point (mm) the rotation is applied about.

    Returns
    -------
    ndarray, shape (4, 4), float64
        T(center) @ T(t) @ Rz(rz) @ Ry(ry) @ Rx(rx) @ T(-center).
    """
    if not isinstance(params, RigidParams):
        params = RigidParams.from_array(params)
    center = np.asarray(center, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(center)):
        raise ValueError("center must be finite")
    rot = _rot_z(params.rz) @ _rot_y(params.ry) @ _rot_x(params.rx)
    m = _trans(center) @ _trans((params.tx, params.ty, params.tz)) @ rot @ _trans(-center)
    # zero params must give the exact identity, not an eps-perturbed one
    if params.is_identity:
        return IDENTITY4.copy()
    return m


def is_rigid(m: np.ndarray, tol: float = 1e-9) -> bool:
    """True when the upper-left block is orthonormal with det +1 and the
    bottom row is exactly (0, 0, 0, 1)."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (4, 4):
        return False
    if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
        return False
    r = m[:3, :3]
    if np.max(np.abs(r.T @ r - np.eye(3))) > tol:
        return False
    return abs(np.linalg.det(r) - 1.0) <= tol


def _as_matrix(x, center) -> np.ndarray:
    if isinstance(x, RigidParams):
        return rigid_matrix(x, center)
    m = np.asarray(x, dtype=np.float64)
    if m.shape != (4, 4):
        raise ValueError(f"expected RigidParams or 4x4 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("transform contains non-finite entries")
    return m


def compose(a, b, center=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Matrix product a @ b; either argument may be RigidParams (converted
    about ``center``) or an existing Mat4."""
    return _as_matrix(a, center) @ _as_matrix(b, center)


def invert(m: np.ndarray) -> np.ndarray:
    """Invert a rigid matrix analytically: R^T on the block, -R^T t on the
    translation column. Cheaper than a general inverse and stays exactly rigid."""
    m = np.asarray(m, dtype=np.float64)
    r = m[:3, :3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ m[:3, 3]
    return out


def apply_transform(m: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 4x4 homogeneous matrix to an (N, 3) array of world points."""
    pts = np.asarray(points, dtype=np.float64)
    squeeze = pts.ndim == 1
    pts = np.atleast_2d(pts)
    out = pts @ np.asarray(m)[:3, :3].T + np.asarray(m)[:3, 3]
    return out[0] if squeeze else out


def tre(surface_points: np.ndarray, estimate: np.ndarray, ground_truth: np.ndarray) -> float:
    """Mean Euclidean distance between surface points mapped by the two
    transforms. Serves both as the training label and as the evaluation
    measure; multiple off-center points make rotations visible in the value.
    """
    pts = np.asarray(surface_points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] == 0:
        raise ValueError(f"surface points must be a non-empty (N, 3) array, got {pts.shape}")
    a = apply_transform(estimate, pts)
    b = apply_transform(ground_truth, pts)
    return float(np.mean(np.sqrt(np.sum((a - b) ** 2, axis=1))))
