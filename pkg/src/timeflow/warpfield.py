"""Deformation-field algebra: resampling, composition, stationary-velocity
integration, and Jacobian analysis.

Fields are stored as per-voxel displacements u (D,H,W,3) in voxel units; the
transform they represent is phi(x) = x + u(x). Warping is the pull-back
I(x + u(x)) with trilinear interpolation and clamp-to-edge border handling.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import nifti
from .errors import DimensionMismatchError
from .imagegrid import Volume


@dataclass
class DisplacementField:
    """Per-voxel displacement in voxel units; maps x to x + u(x)."""

    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 4 or self.u.shape[-1] != 3:
            raise DimensionMismatchError(
                f"displacement field must be (D,H,W,3), got {self.u.shape}"
            )
        if not np.all(np.isfinite(self.u)):
            raise ValueError("displacement field contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.u.shape[:3]


@dataclass
class StationaryVelocityField:
    """Per-voxel velocity in voxel units per unit time."""

    v: np.ndarray

    def __post_init__(self):
        self.v = np.asarray(self.v, dtype=np.float64)
        if self.v.ndim != 4 or self.v.shape[-1] != 3:
            raise DimensionMismatchError(
                f"velocity field must be (D,H,W,3), got {self.v.shape}"
            )
        if not np.all(np.isfinite(self.v)):
            raise ValueError("velocity field contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.v.shape[:3]


def identity_field(dims) -> DisplacementField:
    dims = tuple(int(d) for d in dims)
    if any(d <= 0 for d in dims):
        raise ValueError(f"dims must be positive, got {dims}")
    return DisplacementField(np.zeros((*dims, 3)))


def _sample_coords(u: np.ndarray) -> np.ndarray:
    """Deformed sample coordinates x + u(x) as a (3,D,H,W) array."""
    dims = u.shape[:3]
    base = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    return np.stack([base[i] + u[..., i] for i in range(3)])


def warp_array(data: np.ndarray, u: np.ndarray, order: int = 1) -> np.ndarray:
    """Resample `data` at x + u(x). order=1 trilinear, 0 nearest; clamp-to-edge."""
    if data.shape != u.shape[:3]:
        raise DimensionMismatchError(f"image dims {data.shape} != field dims {u.shape[:3]}")
    coords = _sample_coords(u)
    return ndimage.map_coordinates(data, coords, order=order, mode="nearest")


def warp(volume: Volume, phi: DisplacementField) -> Volume:
    """Pull-back warp of a volume; the mask is transported with nearest-neighbor."""
    data = warp_array(volume.data, phi.u, order=1)
    mask = None
    if volume.mask is not None:
        mask = warp_array(volume.mask.astype(np.float64), phi.u, order=0) > 0.5
    return Volume(data, spacing=volume.spacing, origin=volume.origin, mask=mask)


def compose_arrays(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Displacement of a∘b: u(x) = u_b(x) + u_a(x + u_b(x))."""
    if a.shape != b.shape:
        raise DimensionMismatchError(f"field dims differ: {a.shape} vs {b.shape}")
    coords = _sample_coords(b)
    sampled = np.stack(
        [ndimage.map_coordinates(a[..., i], coords, order=1, mode="nearest") for i in range(3)],
        axis=-1,
    )
    return b + sampled


def compose(a: DisplacementField, b: DisplacementField) -> DisplacementField:
    """Composite field c with x + u_c(x) = a(b(x)), so that
    warp(warp(I, a), b) matches warp(I, compose(a, b)) up to interpolation error."""
    return DisplacementField(compose_arrays(a.u, b.u))


def integrate_svf(v: StationaryVelocityField | np.ndarray, steps: int = 7) -> DisplacementField:
    """Scaling-and-squaring exponential of a stationary velocity field."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    vu = v.v if isinstance(v, StationaryVelocityField) else np.asarray(v, dtype=np.float64)
    u = vu / (2.0 ** steps)
    for _ in range(steps):
        u = compose_arrays(u, u)
    return DisplacementField(u)


def jacobian_det(phi: DisplacementField | np.ndarray) -> np.ndarray:
    """Per-voxel det(grad phi), central differences inside, one-sided at borders."""
    u = phi.u if isinstance(phi, DisplacementField) else np.asarray(phi, dtype=np.float64)
    if any(n < 3 for n in u.shape[:3]):
        raise ValueError(f"need >=3 voxels per axis for gradients, got {u.shape[:3]}")
    J = np.empty(u.shape[:3] + (3, 3))
    for i in range(3):
        grads = np.gradient(u[..., i], axis=(0, 1, 2))
        for j in range(3):
            J[..., i, j] = grads[j] + (1.0 if i == j else 0.0)
    a, b, c = J[..., 0, 0], J[..., 0, 1], J[..., 0, 2]
    d, e, f = J[..., 1, 0], J[..., 1, 1], J[..., 1, 2]
    g, h, i_ = J[..., 2, 0], J[..., 2, 1], J[..., 2, 2]
    return a * (e * i_ - f * h) - b * (d * i_ - f * g) + c * (d * h - e * g)


def save_field(phi: DisplacementField, path: str, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> None:
    """Serialize as 4D NIfTI with the vector dimension last."""
    nifti.write(path, phi.u, spacing=spacing, origin=origin)


def load_field(path: str) -> DisplacementField:
    data, _, _ = nifti.read(path)
    data = np.squeeze(data)  # tolerate (D,H,W,1,3) writers
    return DisplacementField(data)
