"""Time-conditioned registration network: two volumes plus a continuous time
variable in, a dense displacement field out.

The scalar time is lifted through a sinusoidal encoding and a small MLP; the
resulting latent steers scale/shift heads of adaptive instance normalization
at every resolution stage of a 3D U-Net. In diffeomorphic mode the raw network
output is a stationary velocity field integrated by scaling-and-squaring.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import DimensionMismatchError
from .imagegrid import Volume
from .torchops import integrate_velocity, tensor_to_field, volume_to_tensor
from .warpfield import DisplacementField, identity_field

CHECKPOINT_FORMAT = "timeflow-checkpoint-v1"

# t in years-normalized units is tiny compared to the token positions the
# classic encoding was built for; pre-scaling keeps the frequency ladder useful
TIME_PRESCALE = 100.0
FREQUENCY_BASE = 1.0e4


def sinusoidal_time_encoding(
    t: torch.Tensor, dim: int = 16, prescale: float = TIME_PRESCALE, base: float = FREQUENCY_BASE
) -> torch.Tensor:
    """Raw sin/cos features of shape (B, dim): dim/2 sine then dim/2 cosine
    components over a geometric frequency ladder."""
    if dim % 2 != 0:
        raise ValueError("encoding dim must be even")
    half = dim // 2
    tau = t.reshape(-1, 1)
    if not tau.is_floating_point():
        tau = tau.to(torch.float32)
    tau = tau * prescale
    i = torch.arange(half, device=t.device, dtype=tau.dtype)
    freqs = base ** (-i / half)
    angles = tau * freqs
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TimeEmbedding(nn.Module):
    """Sinusoidal encoding followed by a 2-layer MLP; the shared time latent."""

    def __init__(self, dim: int = 16, prescale: float = TIME_PRESCALE, base: float = FREQUENCY_BASE):
        super().__init__()
        self.dim = dim
        self.prescale = prescale
        self.base = base
        self.mlp = nn.Sequential(nn.Linear(dim, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        if not torch.is_tensor(t):
            t = torch.as_tensor(t, dtype=torch.float32)
        if not torch.all(torch.isfinite(t)):
            raise ValueError("time values must be finite")
        enc = sinusoidal_time_encoding(t, self.dim, self.prescale, self.base)
        return self.mlp(enc.to(next(self.mlp.parameters()).dtype))


def embed_time(embedding: TimeEmbedding, t) -> torch.Tensor:
    """Deterministic 16-vector latent for a scalar time."""
    with torch.no_grad():
        return embedding(torch.as_tensor([float(t)]))[0]


class AdaptiveInstanceNorm(nn.Module):
    """Instance normalization whose affine parameters come from the time latent.

    With the heads at their initial values (scale 1, shift 0) this is plain
    instance normalization, so an untrained net is time-agnostic but stable.
    """

    def __init__(self, channels: int, embed_dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.scale_head = nn.Sequential(nn.Linear(embed_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, channels))
        self.shift_head = nn.Sequential(nn.Linear(embed_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, channels))
        nn.init.zeros_(self.scale_head[-1].weight)
        nn.init.ones_(self.scale_head[-1].bias)
        nn.init.zeros_(self.shift_head[-1].weight)
        nn.init.zeros_(self.shift_head[-1].bias)

    def forward(self, x: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        mean = x.mean(dim=(2, 3, 4), keepdim=True)
        var = x.var(dim=(2, 3, 4), unbiased=False, keepdim=True)
        normed = (x - mean) / torch.sqrt(var + self.eps)
        scale = self.scale_head(z)[:, :, None, None, None]
        shift = self.shift_head(z)[:, :, None, None, None]
        return normed * scale + shift


class _ConditionedStage(nn.Module):
    def __init__(self, c_in: int, c_out: int, embed_dim: int, stride: int = 1):
        super().__init__()
        self.conv = nn.Conv3d(c_in, c_out, kernel_size=3, stride=stride, padding=1)
        self.norm = AdaptiveInstanceNorm(c_out, embed_dim)
        self.act = nn.LeakyReLU(0.2)

    def forward(self, x, z):
        return self.act(self.norm(self.conv(x), z))


class TimeConditionedRegNet(nn.Module):
    """U-Net over the channel-concatenated image pair, conditioned on time.

    mode "direct" emits the displacement field straight from the head; mode
    "diffeomorphic" treats the head output as a stationary velocity field and
    integrates it with scaling-and-squaring.
    """

    def __init__(
        self,
        channels: tuple[int, ...] = (32, 32, 48, 48, 96),
        embed_dim: int = 16,
        mode: str = "direct",
        integration_steps: int = 7,
        velocity_scale: float = 1.0,
    ):
        super().__init__()
        if mode not in ("direct", "diffeomorphic"):
            raise ValueError(f"unknown mode {mode!r}")
        if len(channels) < 2:
            raise ValueError("need at least two channel stages")
        self.channels = tuple(int(c) for c in channels)
        self.embed_dim = embed_dim
        self.mode = mode
        self.integration_steps = integration_steps
        self.velocity_scale = velocity_scale

        self.time_embedding = TimeEmbedding(embed_dim)
        ch = self.channels
        self.encoder = nn.ModuleList(
            [_ConditionedStage(2, ch[0], embed_dim, stride=1)]
            + [_ConditionedStage(ch[i - 1], ch[i], embed_dim, stride=2) for i in range(1, len(ch))]
        )
        self.decoder = nn.ModuleList(
            [_ConditionedStage(ch[i + 1] + ch[i], ch[i], embed_dim) for i in reversed(range(len(ch) - 1))]
        )
        self.head = nn.Conv3d(ch[0], 3, kernel_size=3, padding=1)
        nn.init.normal_(self.head.weight, std=1e-5)
        nn.init.zeros_(self.head.bias)

    @property
    def levels(self) -> int:
        return len(self.channels)

    def _as_time(self, t, batch: int, device, dtype) -> torch.Tensor:
        t = torch.as_tensor(t, device=device, dtype=dtype)
        if t.ndim == 0:
            t = t.repeat(batch)
        if t.shape[0] != batch:
            raise ValueError(f"got {t.shape[0]} time values for batch of {batch}")
        if not torch.all(torch.isfinite(t)):
            raise ValueError("time values must be finite")
        return t

    def forward(self, x0: torch.Tensor, xl: torch.Tensor, t) -> torch.Tensor:
        """Raw head output (B,3,D,H,W): displacement (direct) or velocity (diffeomorphic)."""
        if x0.shape != xl.shape:
            raise DimensionMismatchError(f"input shapes differ: {tuple(x0.shape)} vs {tuple(xl.shape)}")
        t = self._as_time(t, x0.shape[0], x0.device, x0.dtype)
        z = self.time_embedding(t)

        x = torch.cat([x0, xl], dim=1)
        dims = x.shape[2:]
        multiple = 2 ** (self.levels - 1)
        pad = []
        for n in reversed(dims):  # F.pad lists (W, H, D) pairs
            extra = (-n) % multiple
            pad.extend([0, extra])
        padded = any(p > 0 for p in pad)
        if padded:
            x = F.pad(x, pad, mode="replicate")

        skips = []
        for stage in self.encoder:
            x = stage(x, z)
            skips.append(x)
        skips.pop()  # bottleneck output is `x` itself
        for stage in self.decoder:
            x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
            x = torch.cat([x, skips.pop()], dim=1)
            x = stage(x, z)
        out = self.head(x)
        if padded:
            out = out[:, :, : dims[0], : dims[1], : dims[2]]
        return out

    def displacement(self, x0: torch.Tensor, xl: torch.Tensor, t) -> torch.Tensor:
        """Displacement field at time t; identically zero wherever t == 0."""
        t_vec = self._as_time(t, x0.shape[0], x0.device, x0.dtype)
        raw = self.forward(x0, xl, t_vec)
        if self.mode == "diffeomorphic":
            out = integrate_velocity(raw * self.velocity_scale, self.integration_steps)
        else:
            out = raw
        nonzero = (t_vec != 0).to(out.dtype).view(-1, 1, 1, 1, 1)
        return out * nonzero


def predict_field(net, I0: Volume, IL: Volume, t: float) -> DisplacementField:
    """Field taking the baseline toward the follow-up at continuous time t.

    t=0 is the identity by definition and short-circuits the network.
    """
    if I0.dims != IL.dims:
        raise DimensionMismatchError(f"volume dims differ: {I0.dims} vs {IL.dims}")
    t = float(t)
    if not math.isfinite(t):
        raise ValueError("t must be finite")
    if t == 0.0:
        return identity_field(I0.dims)
    for vol, name in ((I0, "I0"), (IL, "IL")):
        lo, hi = float(vol.data.min()), float(vol.data.max())
        if hi > 2.0 or lo < -0.5:
            warnings.warn(
                f"{name} intensity range [{lo:.3g}, {hi:.3g}] looks unnormalized; "
                "expected roughly [0, 1]",
                stacklevel=2,
            )
    dtype = next(net.parameters()).dtype
    device = next(net.parameters()).device
    x0 = volume_to_tensor(I0, device=device, dtype=dtype)
    xl = volume_to_tensor(IL, device=device, dtype=dtype)
    was_training = net.training
    net.eval()
    try:
        with torch.no_grad():
            out = net.displacement(x0, xl, t)
    finally:
        net.train(was_training)
    return DisplacementField(tensor_to_field(out))


def save_checkpoint(net: TimeConditionedRegNet, path: str, metadata: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "channels": list(net.channels),
        "embed_dim": net.embed_dim,
        "mode": net.mode,
        "integration_steps": net.integration_steps,
        "velocity_scale": net.velocity_scale,
        "state_dict": net.state_dict(),
        "metadata": dict(metadata or {}),
    }
    torch.save(payload, path)


def load_checkpoint(path: str) -> tuple[TimeConditionedRegNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a recognized checkpoint: {path}")
    net = TimeConditionedRegNet(
        channels=tuple(payload["channels"]),
        embed_dim=payload["embed_dim"],
        mode=payload["mode"],
        integration_steps=payload["integration_steps"],
        velocity_scale=payload["velocity_scale"],
    )
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return net, payload["metadata"]
