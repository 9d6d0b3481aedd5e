"""Differentiable torch counterparts of the field algebra.

Tensor layout: images are (B, C, D, H, W), displacement fields (B, 3, D, H, W)
with channel i displacing along spatial axis i, in voxel units. Conventions
(trilinear pull-back, clamp-to-edge borders) match the numpy implementations in
`warpfield`, so fields computed here can be handed to the numpy side verbatim.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F


def _base_grid(dims, device, dtype) -> torch.Tensor:
    axes = [torch.arange(n, device=device, dtype=dtype) for n in dims]
    grid = torch.meshgrid(*axes, indexing="ij")
    return torch.stack(grid)  # (3, D, H, W)


def _to_sample_grid(positions: torch.Tensor) -> torch.Tensor:
    """Voxel positions (B,3,D,H,W) -> grid_sample grid (B,D,H,W,3) in [-1,1].

    grid_sample expects the last dim ordered (x, y, z) = (W, H, D).
    """
    dims = positions.shape[2:]
    norm = []
    for axis in (2, 1, 0):
        n = dims[axis]
        scale = 2.0 / max(n - 1, 1)
        norm.append(positions[:, axis] * scale - 1.0)
    return torch.stack(norm, dim=-1)


def warp_tensor(image: torch.Tensor, flow: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """Pull-back warp: out(x) = image(x + flow(x))."""
    if image.shape[2:] != flow.shape[2:]:
        raise ValueError(f"image dims {tuple(image.shape[2:])} != flow dims {tuple(flow.shape[2:])}")
    base = _base_grid(image.shape[2:], image.device, flow.dtype).unsqueeze(0)
    grid = _to_sample_grid(base + flow)
    return F.grid_sample(image, grid, mode=mode, padding_mode="border", align_corners=True)


def compose_tensor(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Displacement of a∘b: u(x) = u_b(x) + u_a(x + u_b(x))."""
    return b + warp_tensor(a, b)


def integrate_velocity(v: torch.Tensor, steps: int = 7) -> torch.Tensor:
    """Scaling-and-squaring exponential of a stationary velocity field."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    u = v / (2.0 ** steps)
    for _ in range(steps):
        u = compose_tensor(u, u)
    return u


def field_to_tensor(u, device="cpu", dtype=torch.float32) -> torch.Tensor:
    """Numpy (D,H,W,3) displacement -> torch (1,3,D,H,W)."""
    import numpy as np

    arr = np.moveaxis(np.asarray(u), -1, 0)[None]
    return torch.as_tensor(arr.copy(), device=device, dtype=dtype)


def tensor_to_field(t: torch.Tensor):
    """Torch (1,3,D,H,W) or (3,D,H,W) displacement -> numpy (D,H,W,3)."""
    import numpy as np

    arr = t.detach().cpu().numpy()
    if arr.ndim == 5:
        arr = arr[0]
    return np.moveaxis(arr, 0, -1).astype(np.float64)


def volume_to_tensor(volume, device="cpu", dtype=torch.float32) -> torch.Tensor:
    """Volume -> torch (1,1,D,H,W)."""
    return torch.as_tensor(volume.data, device=device, dtype=dtype)[None, None]


def mask_to_tensor(mask, device="cpu", dtype=torch.float32) -> torch.Tensor:
    import numpy as np

    return torch.as_tensor(np.asarray(mask, dtype=bool), device=device)[None, None].to(dtype)
