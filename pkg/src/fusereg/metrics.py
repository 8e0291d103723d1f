"""Similarity metrics: mutual information, MIND-SSD, and multipass smoothing.

Every metric in this package is minimized: lower value means better
alignment. Mutual information is therefore stored negated. The multipass
wrapper averages a metric over N slightly perturbed resamplings of the
moving image, which smooths out local roughness of the objective along the
parameter axes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .resample import resample
from .transforms import RigidParams, rigid_matrix
from .volume import Volume3D

__all__ = [
    "mutual_information",
    "MindConfig",
    "mind_descriptor",
    "mind_ssd",
    "MultipassConfig",
    "multipass",
]

SIX_NEIGHBORHOOD = (
    (1, 0, 0),
    (-1, 0, 0),
    (0, 1, 0),
    (0, -1, 0),
    (0, 0, 1),
    (0, 0, -1),
)


def _check_same_grid(a: Volume3D, b: Volume3D) -> None:
    if not a.same_geometry(b):
        raise ValueError(
            f"volumes must share grid geometry: {a.dims}/{a.spacing}/{a.origin} "
            f"vs {b.dims}/{b.spacing}/{b.origin}"
        )


def _quantize(data: np.ndarray, bins: int) -> np.ndarray | None:
    """Min-max normalize to [0, 1] and bucket into ``bins`` levels.
    Returns None for a constant image (zero intensity range)."""
    x = data.ravel().astype(np.float64)
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return None
    q = np.floor((x - lo) / (hi - lo) * bins).astype(np.int64)
    np.minimum(q, bins - 1, out=q)
    return q


def mutual_information(a: Volume3D, b: Volume3D, bins: int = 32) -> float:
    """Negated mutual information (nats) from a bins x bins joint histogram.

    Intensities are min-max normalized per image. A constant image has zero
    entropy, so MI is defined as 0 there. Per-cell entropy terms are summed
    in sorted order, which makes mi(a, b) == mi(b, a) bit-exact, and the
    result is clamped at >= 0 before negation.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    _check_same_grid(a, b)
    qa = _quantize(a.data, bins)
    qb = _quantize(b.data, bins)
    if qa is None or qb is None:
        return 0.0
    joint = np.bincount(qa * bins + qb, minlength=bins * bins).reshape(bins, bins)
    n = qa.size
    pa = joint.sum(axis=1)
    pb = joint.sum(axis=0)
    i, j = np.nonzero(joint)
    c = joint[i, j].astype(np.float64)
    # commutative marginal sum plus sorted-order reduction keep the result
    # bit-identical under argument swap
    marg = np.log(pa[i].astype(np.float64)) + np.log(pb[j].astype(np.float64))
    terms = c / n * (np.log(c * n) - marg)
    mi = float(np.sum(np.sort(terms)))
    return -max(mi, 0.0)


@dataclass(frozen=True)
class MindConfig:
    """Modality-independent neighborhood descriptor settings.

    The patch distance d(x, r) is a Gaussian-weighted (sigma in voxels,
    kernel normalized to unit sum) SSD between the patches centered at x and
    x + r. Borders use edge-replicate padding so a constant volume has zero
    patch distance everywhere. The descriptor component for offset r is
    exp(-d / V) where V is the mean of d over the neighborhood, floored by
    ``variance_floor``; each voxel's components are then scaled so the
    largest equals 1.
    """

    patch_radius: int = 1
    neighborhood: tuple = SIX_NEIGHBORHOOD
    gaussian_sigma: float = 0.5
    variance_floor: float = 1e-6

    def __post_init__(self):
        if self.patch_radius < 1:
            raise ValueError("patch_radius must be >= 1")
        if len(self.neighborhood) == 0:
            raise ValueError("neighborhood must be non-empty")
        if self.gaussian_sigma <= 0:
            raise ValueError("gaussian_sigma must be > 0")
        object.__setattr__(
            self, "neighborhood", tuple(tuple(int(c) for c in r) for r in self.neighborhood)
        )

    def patch_kernel(self) -> np.ndarray:
        """(2R+1)^3 Gaussian weights over patch offsets, sum normalized to 1."""
        r = self.patch_radius
        ax = np.arange(-r, r + 1, dtype=np.float64)
        dz, dy, dx = np.meshgrid(ax, ax, ax, indexing="ij")
        k = np.exp(-(dx**2 + dy**2 + dz**2) / (2.0 * self.gaussian_sigma**2))
        return k / k.sum()


def _shift_zero_pad(data: np.ndarray, offset) -> np.ndarray:
    """out(x) = data(x + offset), zeros where x + offset leaves the array.
    offset is (ox, oy, oz) in voxels; data is (nz, ny, nx)."""
    out = np.zeros_like(data)
    src = [slice(None)] * 3
    dst = [slice(None)] * 3
    for axis, o in zip((2, 1, 0), offset):
        n = data.shape[axis]
        if abs(o) >= n:
            return out
        if o >= 0:
            dst[axis] = slice(0, n - o)
            src[axis] = slice(o, n)
        else:
            dst[axis] = slice(-o, n)
            src[axis] = slice(0, n + o)
    out[tuple(dst)] = data[tuple(src)]
    return out


def mind_descriptor(v: Volume3D, cfg: MindConfig = MindConfig()) -> np.ndarray:
    """Per-voxel MIND descriptor field, shape (len(neighborhood), nz, ny, nx).

    All components lie in (0, 1] and each voxel's maximum component is
    exactly 1.
    """
    kernel = cfg.patch_kernel()
    # pad far enough that every patch lookup, shifted or not, stays in bounds
    pad = cfg.patch_radius + max(abs(c) for off in cfg.neighborhood for c in off)
    dpad = np.pad(v.data.astype(np.float64), pad, mode="edge")
    nz, ny, nx = v.data.shape
    core = (slice(pad, pad + nz), slice(pad, pad + ny), slice(pad, pad + nx))
    k = len(cfg.neighborhood)
    d = np.empty((k, nz, ny, nx), dtype=np.float64)
    for idx, off in enumerate(cfg.neighborhood):
        diff = (dpad - _shift_zero_pad(dpad, off)) ** 2
        d[idx] = ndimage.correlate(diff, kernel, mode="constant", cval=0.0)[core]
    vmean = np.maximum(d.mean(axis=0), cfg.variance_floor)
    desc = np.exp(-d / vmean)
    desc /= desc.max(axis=0)
    return desc


def mind_ssd(a: Volume3D, b: Volume3D, cfg: MindConfig = MindConfig()) -> float:
    """Mean squared difference between the MIND descriptor fields of a and b."""
    _check_same_grid(a, b)
    da = mind_descriptor(a, cfg)
    db = mind_descriptor(b, cfg)
    return float(np.mean((da - db) ** 2))


@dataclass(frozen=True)
class MultipassConfig:
    """Settings for the N-pass perturbation average.

    The N perturbations are drawn once from ``rng_seed`` at construction and
    reused for every evaluation, so an optimizer sees a deterministic
    objective for the whole run.
    """

    n_passes: int = 5
    translation_halfwidth: float = 0.25
    rotation_halfwidth: float = 1.0
    rng_seed: int = 0
    perturbations: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.n_passes < 1:
            raise ValueError("n_passes must be >= 1")
        if self.translation_halfwidth < 0 or self.rotation_halfwidth < 0:
            raise ValueError("halfwidths must be >= 0")
        rng = np.random.default_rng(self.rng_seed)
        perts = []
        for _ in range(self.n_passes):
            t = rng.uniform(-self.translation_halfwidth, self.translation_halfwidth, size=3)
            r = rng.uniform(-self.rotation_halfwidth, self.rotation_halfwidth, size=3)
            perts.append(RigidParams(*t, *r))
        object.__setattr__(self, "perturbations", tuple(perts))


def multipass(
    metric,
    moving: Volume3D,
    fixed: Volume3D,
    candidate: RigidParams,
    cfg: MultipassConfig = MultipassConfig(),
    center=None,
) -> float:
    """Mean of ``metric`` over N perturbed single-interpolation resamplings.

    Each pass composes a small perturbation to the right of the candidate
    (perturbing in moving-image space) and resamples once through the
    composed matrix, so no double interpolation occurs.

    Parameters
    ----------
    metric : callable (resampled_moving, fixed) -> float
    center : rotation center in mm; defaults to the fixed volume's center.
    """
    if center is None:
        center = fixed.center
    base = rigid_matrix(candidate, center)
    total = 0.0
    for pert in cfg.perturbations:
        m = base @ rigid_matrix(pert, center)
        total += float(metric(resample(moving, m, fixed), fixed))
    return total / cfg.n_passes
