"""Mask-restricted evaluation metrics: MAE, PSNR, SDlogJ, NDV, and the
temporal smoothness of a time-conditioned field family."""

from __future__ import annotations

import numpy as np
import torch

from .errors import DimensionMismatchError, EmptyMaskError
from .imagegrid import Volume
from .losses import predict_displacement
from .torchops import mask_to_tensor, tensor_to_field, volume_to_tensor
from .warpfield import DisplacementField, jacobian_det

PSNR_CAP_DB = 100.0
LOG_JACOBIAN_FLOOR = 1e-6


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Volume) else np.asarray(x, dtype=np.float64)


def _resolve_mask(mask, *volumes, dims=None):
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
    else:
        vols = [v for v in volumes if isinstance(v, Volume) and v.mask is not None]
        if vols:
            m = np.zeros(vols[0].mask.shape, dtype=bool)
            for v in vols:
                m |= v.mask
        else:
            m = np.ones(dims, dtype=bool)
    if not m.any():
        raise EmptyMaskError("metric mask selects no voxels")
    return m


def mae(a, b, mask=None) -> float:
    """Mean absolute intensity error over the mask (normalized intensity units)."""
    da, db = _data(a), _data(b)
    if da.shape != db.shape:
        raise DimensionMismatchError(f"shapes differ: {da.shape} vs {db.shape}")
    m = _resolve_mask(mask, a, b, dims=da.shape)
    return float(np.abs(da - db)[m].mean())


def psnr(a, b, mask=None, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for identical inputs."""
    da, db = _data(a), _data(b)
    if da.shape != db.shape:
        raise DimensionMismatchError(f"shapes differ: {da.shape} vs {db.shape}")
    m = _resolve_mask(mask, a, b, dims=da.shape)
    mse = float(np.square(da - db)[m].mean())
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(peak * peak / mse), PSNR_CAP_DB))


def sdlogj(phi: DisplacementField, mask=None) -> float:
    """Standard deviation of log Jacobian determinant over the mask.

    Determinants are floored at 1e-6 before the log so folded voxels count as
    extreme rather than undefined.
    """
    det = jacobian_det(phi)
    m = _resolve_mask(mask, dims=det.shape)
    logs = np.log(np.maximum(det, LOG_JACOBIAN_FLOOR))
    return float(np.std(logs[m]))


# ---------------------------------------------------------------------------
# Non-diffeomorphic volume
# ---------------------------------------------------------------------------

_CUBE_CORNERS = {
    (dx, dy, dz): idx
    for idx, (dx, dy, dz) in enumerate(
        (a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)
    )
}


def _c(dx, dy, dz):
    return _CUBE_CORNERS[(dx, dy, dz)]

# Each unit cell is split into five tetrahedra in two mirror-image ways: four
# corner tets around a central one, the central tet spanning the even-parity
# corners in one decomposition and the odd-parity corners in the other.
_RAW_TETS = [
    # decomposition A
    (_c(1, 0, 0), _c(0, 0, 0), _c(1, 1, 0), _c(1, 0, 1)),
    (_c(0, 1, 0), _c(0, 0, 0), _c(1, 1, 0), _c(0, 1, 1)),
    (_c(0, 0, 1), _c(0, 0, 0), _c(1, 0, 1), _c(0, 1, 1)),
    (_c(1, 1, 1), _c(1, 1, 0), _c(1, 0, 1), _c(0, 1, 1)),
    (_c(0, 0, 0), _c(1, 1, 0), _c(1, 0, 1), _c(0, 1, 1)),
    # decomposition B (mirror)
    (_c(0, 0, 0), _c(1, 0, 0), _c(0, 1, 0), _c(0, 0, 1)),
    (_c(1, 1, 0), _c(1, 0, 0), _c(0, 1, 0), _c(1, 1, 1)),
    (_c(1, 0, 1), _c(1, 0, 0), _c(0, 0, 1), _c(1, 1, 1)),
    (_c(0, 1, 1), _c(0, 1, 0), _c(0, 0, 1), _c(1, 1, 1)),
    (_c(1, 0, 0), _c(0, 1, 0), _c(0, 0, 1), _c(1, 1, 1)),
]


def _orient_tets():
    """Reorder vertices so every tet has positive volume under the identity map."""
    corners = np.array(sorted(_CUBE_CORNERS, key=_CUBE_CORNERS.get), dtype=np.float64)
    oriented = []
    for tet in _RAW_TETS:
        v = corners[list(tet)]
        det = np.linalg.det(np.stack([v[1] - v[0], v[2] - v[0], v[3] - v[0]], axis=-1))
        oriented.append(tet if det > 0 else (tet[0], tet[1], tet[3], tet[2]))
    return tuple(oriented)


SIMPLEX_TETS = _orient_tets()


def _triple_product(e1, e2, e3):
    cx = e2[..., 1] * e3[..., 2] - e2[..., 2] * e3[..., 1]
    cy = e2[..., 2] * e3[..., 0] - e2[..., 0] * e3[..., 2]
    cz = e2[..., 0] * e3[..., 1] - e2[..., 1] * e3[..., 0]
    return e1[..., 0] * cx + e1[..., 1] * cy + e1[..., 2] * cz


def simplex_determinants(phi: DisplacementField) -> np.ndarray:
    """Signed volumes (x6) of all 10 tets per unit cell; shape (D-1,H-1,W-1,10)."""
    u = phi.u
    dims = u.shape[:3]
    if any(n < 2 for n in dims):
        raise ValueError("need at least 2 voxels per axis for unit cells")
    base = np.stack(
        np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij"),
        axis=-1,
    )
    pos = base + u
    corners = []
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                corners.append(
                    pos[
                        dx : dims[0] - 1 + dx,
                        dy : dims[1] - 1 + dy,
                        dz : dims[2] - 1 + dz,
                    ]
                )
    dets = []
    for v0, v1, v2, v3 in SIMPLEX_TETS:
        e1 = corners[v1] - corners[v0]
        e2 = corners[v2] - corners[v0]
        e3 = corners[v3] - corners[v0]
        dets.append(_triple_product(e1, e2, e3))
    return np.stack(dets, axis=-1)


def ndv(phi: DisplacementField, mask=None, spacing=(1.0, 1.0, 1.0)) -> float:
    """Non-diffeomorphic volume.

    Each voxel owns the forward unit cell anchored at it; the cell is split
    into tetrahedra by two decompositions (10 simplices) and the voxel
    contributes the fraction with non-positive signed volume, times the voxel
    volume from `spacing`. Voxels without a forward cell contribute nothing.
    """
    dets = simplex_determinants(phi)
    folded_fraction = (dets <= 0).mean(axis=-1)
    dims = phi.dims
    m = _resolve_mask(mask, dims=dims)
    cell_mask = m[: dims[0] - 1, : dims[1] - 1, : dims[2] - 1]
    voxel_volume = float(np.prod(spacing))
    return float((folded_fraction * cell_mask).sum() * voxel_volume)


def temporal_smoothness(net, I0: Volume, IL: Volume, t_range=(0.0, 2.0), dt: float = 0.25, mask=None) -> float:
    """Dirichlet-energy style temporal roughness of the field family.

    Finite-differences the deformation over t sampled at `dt`, takes the
    euclidean norm of the per-voxel derivative, and averages over brain voxels
    and time samples. A family linear in t returns exactly the step magnitude.
    """
    t0, t1 = float(t_range[0]), float(t_range[1])
    if not t1 > t0:
        raise ValueError(f"degenerate t_range {t_range}")
    ts = np.arange(t0, t1 + dt / 2, dt)
    if len(ts) < 2:
        raise ValueError("t_range must cover at least two samples")
    if I0.dims != IL.dims:
        raise DimensionMismatchError(f"volume dims differ: {I0.dims} vs {IL.dims}")
    m = _resolve_mask(mask, I0, IL, dims=I0.dims)

    dtype = next(net.parameters()).dtype if hasattr(net, "parameters") else torch.float64
    x0 = volume_to_tensor(I0, dtype=dtype)
    xl = volume_to_tensor(IL, dtype=dtype)
    fields = []
    with torch.no_grad():
        for t in ts:
            fields.append(tensor_to_field(predict_displacement(net, x0, xl, float(t), 1.0)))
    norms = []
    for a, b in zip(fields, fields[1:]):
        dphi = (b - a) / dt
        norms.append(np.linalg.norm(dphi, axis=-1)[m].mean())
    return float(np.mean(norms))
