"""Training loop over longitudinal pairs, with checkpointing and validation."""

from __future__ import annotations

import csv
import os
import tempfile
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
import torch

from .errors import TrainingDivergedError
from .imagegrid import LongitudinalSeries, Volume, normalize_intensity
from .losses import (
    DEFAULT_GUARD,
    DEFAULT_RADIUS,
    LossWeights,
    predict_displacement,
    sample_triplet,
    total_training_loss,
)
from .metrics import mae as mae_metric
from .metrics import psnr as psnr_metric
from .tempnet import TimeConditionedRegNet, load_checkpoint, save_checkpoint
from .torchops import mask_to_tensor, tensor_to_field, volume_to_tensor, warp_tensor
from .warpfield import DisplacementField

LOSS_LOG_COLUMNS = (
    "step",
    "subject",
    "t_hat_1",
    "t_hat_2",
    "total",
    "sim_inter",
    "flow_inter",
    "sim_ext",
    "flow_ext",
)


@dataclass
class TrainConfig:
    mode: str = "direct"  # or "diffeomorphic"
    weights: LossWeights | None = None  # None -> mode defaults
    learning_rate: float = 1e-4
    steps: int = 1000
    seed: int = 0
    val_every: int = 0  # 0 disables periodic validation
    triplets_per_step: int = 2  # t_hat draws per subject per step
    guard: float = DEFAULT_GUARD
    radius: int = DEFAULT_RADIUS
    channels: tuple[int, ...] = (32, 32, 48, 48, 96)
    embed_dim: int = 16
    integration_steps: int = 7
    velocity_scale: float = 1.0
    device: str = "cpu"
    out_dir: str | None = None
    pair_policy: str = "first_last"

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.pair_policy != "first_last":
            raise ValueError(f"unknown pair policy {self.pair_policy!r}")
        if self.weights is None:
            self.weights = LossWeights.for_mode(self.mode)


@dataclass
class Checkpoint:
    """A trained network plus its training metadata."""

    net: TimeConditionedRegNet
    metadata: dict = field(default_factory=dict)

    def save(self, path: str) -> None:
        save_checkpoint(self.net, path, metadata=self.metadata)

    @classmethod
    def load(cls, path: str) -> "Checkpoint":
        net, metadata = load_checkpoint(path)
        return cls(net=net, metadata=metadata)


def _prepare_pair(series: LongitudinalSeries, device, dtype):
    """Normalized (first, last) visit tensors and their union foreground mask."""
    first, last = series.first_last()
    v0 = normalize_intensity(first)
    vl = normalize_intensity(last)
    x0 = volume_to_tensor(v0, device=device, dtype=dtype)
    xl = volume_to_tensor(vl, device=device, dtype=dtype)
    union = first.foreground() | last.foreground()
    mask = mask_to_tensor(union, device=device, dtype=dtype)
    return x0, xl, mask


def _dump_diagnostics(out_dir, step, subject_id, t_hats, components):
    target = out_dir if out_dir else tempfile.gettempdir()
    os.makedirs(target, exist_ok=True)
    path = os.path.join(target, f"nan_dump_step{step}.npz")
    np.savez(
        path,
        step=step,
        subject=subject_id,
        t_hats=np.asarray(t_hats),
        **{k: np.asarray(v) for k, v in components.items()},
    )
    return path


def train(config: TrainConfig, dataset: list[LongitudinalSeries], val_dataset=None) -> Checkpoint:
    """Optimize the network on (first, last) visit pairs.

    Each step picks a subject, draws `triplets_per_step` intermediate times,
    evaluates the consistency objective and applies one Adam update. The run
    is deterministic for a fixed seed. Loss curves and checkpoints land in
    config.out_dir when set.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    for series in dataset:
        if len(series.visits) < 2:
            raise ValueError(f"subject {series.subject_id} has fewer than 2 visits")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    device = torch.device(config.device)
    net = TimeConditionedRegNet(
        channels=config.channels,
        embed_dim=config.embed_dim,
        mode=config.mode,
        integration_steps=config.integration_steps,
        velocity_scale=config.velocity_scale,
    ).to(device)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.learning_rate)

    pairs = [_prepare_pair(s, device, torch.float32) for s in dataset]
    history: list[dict] = []

    for step in range(config.steps):
        subject_idx = int(rng.integers(len(pairs)))
        x0, xl, mask = pairs[subject_idx]
        triplets = [sample_triplet(rng, config.guard) for _ in range(config.triplets_per_step)]

        total, components = total_training_loss(
            net, x0, xl, triplets, config.weights, mask=mask, radius=config.radius
        )
        if not torch.isfinite(total):
            dump = _dump_diagnostics(
                config.out_dir,
                step,
                dataset[subject_idx].subject_id,
                [tr.t_hat for tr in triplets],
                components,
            )
            raise TrainingDivergedError(
                f"non-finite loss at step {step} (subject {dataset[subject_idx].subject_id}); "
                f"diagnostics written to {dump}"
            )
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        row = {
            "step": step,
            "subject": dataset[subject_idx].subject_id,
            "t_hat_1": triplets[0].t_hat,
            "t_hat_2": triplets[1].t_hat if len(triplets) > 1 else float("nan"),
            "total": float(total.detach()),
            **components,
        }
        history.append(row)

        if config.val_every and val_dataset and (step + 1) % config.val_every == 0:
            table = validate(net, val_dataset)
            row["val_interp_mae"] = float(table["interp_mae"].mean())

    metadata = {
        "steps": config.steps,
        "seed": config.seed,
        "mode": config.mode,
        "learning_rate": config.learning_rate,
        "weights": vars(config.weights),
        "final_loss": history[-1]["total"] if history else None,
    }
    checkpoint = Checkpoint(net=net, metadata=metadata)

    if config.out_dir:
        os.makedirs(config.out_dir, exist_ok=True)
        checkpoint.save(os.path.join(config.out_dir, "checkpoint.pt"))
        write_loss_log(history, os.path.join(config.out_dir, "loss_log.csv"))
    return checkpoint


def write_loss_log(history: list[dict], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_LOG_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow(row)


def _resolve_net(model):
    if isinstance(model, Checkpoint):
        return model.net
    return model


def validate(model, dataset: list[LongitudinalSeries]) -> pd.DataFrame:
    """Interpolation and extrapolation image metrics on held-out subjects.

    Interpolation registers (first, last) and scores each intermediate visit at
    its fractional time. Extrapolation registers (first, second) and scores
    every later visit at its extrapolated time. Subjects with fewer than three
    visits are skipped with a warning.
    """
    net = _resolve_net(model)
    dtype = next(net.parameters()).dtype if hasattr(net, "parameters") else torch.float64
    rows = []
    for series in dataset:
        if len(series.visits) < 3:
            warnings.warn(f"subject {series.subject_id}: <3 visits, skipped", stacklevel=2)
            continue
        vols = [normalize_intensity(v) for v in series.volumes]
        ages = series.ages
        masks = [v.foreground() for v in series.volumes]

        # interpolation: (first, last) in, intermediates compared at fractional times
        x0 = volume_to_tensor(vols[0], dtype=dtype)
        xl = volume_to_tensor(vols[-1], dtype=dtype)
        span = ages[-1] - ages[0]
        interp_mae, interp_psnr = [], []
        with torch.no_grad():
            for k in range(1, len(vols) - 1):
                t_k = (ages[k] - ages[0]) / span
                phi = predict_displacement(net, x0, xl, t_k, 1.0)
                warped = warp_tensor(x0, phi)[0, 0].cpu().numpy()
                m = masks[0] | masks[k]
                interp_mae.append(mae_metric(warped, vols[k].data, mask=m))
                interp_psnr.append(psnr_metric(warped, vols[k].data, mask=m))

            # extrapolation: (first, second) in, later visits at t > 1
            x1 = volume_to_tensor(vols[1], dtype=dtype)
            pair_span = ages[1] - ages[0]
            extrap_mae, extrap_psnr = [], []
            for j in range(2, len(vols)):
                t_j = (ages[j] - ages[0]) / pair_span
                phi = predict_displacement(net, x0, x1, t_j, 1.0)
                warped = warp_tensor(x0, phi)[0, 0].cpu().numpy()
                m = masks[0] | masks[j]
                extrap_mae.append(mae_metric(warped, vols[j].data, mask=m))
                extrap_psnr.append(psnr_metric(warped, vols[j].data, mask=m))

        rows.append(
            {
                "subject_id": series.subject_id,
                "n_visits": len(vols),
                "interp_mae": float(np.mean(interp_mae)) if interp_mae else float("nan"),
                "interp_psnr": float(np.mean(interp_psnr)) if interp_psnr else float("nan"),
                "extrap_mae": float(np.mean(extrap_mae)) if extrap_mae else float("nan"),
                "extrap_psnr": float(np.mean(extrap_psnr)) if extrap_psnr else float("nan"),
            }
        )
    return pd.DataFrame(rows, columns=[
        "subject_id", "n_visits", "interp_mae", "interp_psnr", "extrap_mae", "extrap_psnr",
    ])
