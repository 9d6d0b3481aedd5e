"""Windowed similarity and the bidirectional consistency losses.

Time bookkeeping: the input pair (I0, IL) spans normalized time [0, 1]. A
sampled t_hat in (0, 1) names an intermediate state; warping I0 by the field
at t_hat or IL by the field at t_hat - 1 both land there. The pair (I0, Ik)
spans [0, t_hat] of global time, so reaching IL from it means evaluating at
pair-time 1/t_hat; symmetrically (Ik, IL) reaches I0 at 1/(t_hat - 1).

Predictor protocol: losses accept either a TimeConditionedRegNet (whose inputs
carry all pair information) or any callable ``f(x0, xl, t, span) -> (B,3,D,H,W)``
where ``span`` is the fraction of global time the pair covers. Real networks
ignore ``span``; analytic test families need it to stay self-consistent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DimensionMismatchError, EmptyMaskError
from .imagegrid import Volume
from .torchops import mask_to_tensor, volume_to_tensor, warp_tensor

DEFAULT_RADIUS = 4
DEFAULT_GUARD = 0.05
LNCC_EPS = 1e-5


# ---------------------------------------------------------------------------
# Local normalized cross-correlation
# ---------------------------------------------------------------------------

def _box_sum(x: torch.Tensor, radius: int) -> torch.Tensor:
    """Sum over (2r+1)^3 windows (clipped at borders) via cumulative sums."""
    out = x
    for dim in (2, 3, 4):
        n = out.shape[dim]
        shape = list(out.shape)
        shape[dim] = radius
        zeros = out.new_zeros(shape)
        padded = torch.cat([zeros, out, zeros], dim=dim)
        csum = padded.cumsum(dim=dim)
        shape[dim] = 1
        csum = torch.cat([out.new_zeros(shape), csum], dim=dim)
        out = csum.narrow(dim, 2 * radius + 1, n) - csum.narrow(dim, 0, n)
    return out


def lncc_tensor(
    a: torch.Tensor,
    b: torch.Tensor,
    radius: int = DEFAULT_RADIUS,
    mask: torch.Tensor | None = None,
    eps: float = LNCC_EPS,
) -> torch.Tensor:
    """Mean (over mask) of the squared local correlation in (2r+1)^3 windows."""
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    counts = _box_sum(torch.ones_like(a), radius)
    s_a = _box_sum(a, radius)
    s_b = _box_sum(b, radius)
    s_aa = _box_sum(a * a, radius)
    s_bb = _box_sum(b * b, radius)
    s_ab = _box_sum(a * b, radius)

    cross = s_ab - s_a * s_b / counts
    var_a = (s_aa - s_a * s_a / counts).clamp_min(0.0)
    var_b = (s_bb - s_b * s_b / counts).clamp_min(0.0)
    cc = cross * cross / (var_a * var_b + eps)

    if mask is None:
        return cc.mean()
    m = mask.to(cc.dtype)
    total = m.sum()
    if total.item() == 0:
        raise EmptyMaskError("lncc: mask selects no voxels")
    return (cc * m).sum() / total


def lncc(a, b, radius: int = DEFAULT_RADIUS, mask=None, eps: float = LNCC_EPS) -> float:
    """Similarity in [0, ~1]; the loss form used in training is 1 - lncc."""
    a_t, mask_a = _as_image(a)
    b_t, mask_b = _as_image(b)
    if mask is None:
        mask = _union_mask(mask_a, mask_b)
    elif not torch.is_tensor(mask):
        mask = mask_to_tensor(mask, dtype=torch.float64)
    with torch.no_grad():
        return float(lncc_tensor(a_t, b_t, radius=radius, mask=mask, eps=eps))


def _as_image(x):
    """Volume or ndarray -> ((1,1,D,H,W) float64 tensor, optional mask tensor)."""
    if isinstance(x, Volume):
        t = volume_to_tensor(x, dtype=torch.float64)
        m = mask_to_tensor(x.mask, dtype=torch.float64) if x.mask is not None else None
        return t, m
    arr = np.asarray(x, dtype=np.float64)
    return torch.as_tensor(arr)[None, None], None


def _union_mask(*masks):
    present = [m for m in masks if m is not None]
    if not present:
        return None
    out = present[0]
    for m in present[1:]:
        out = torch.maximum(out, m)
    return out


# ---------------------------------------------------------------------------
# Triplet sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SampledTriplet:
    """One sampled intermediate time plus the derived evaluation times."""

    t_hat: float

    def __post_init__(self):
        if not 0.0 < self.t_hat < 1.0:
            raise ValueError(f"t_hat must lie in (0, 1), got {self.t_hat}")

    @property
    def backward_time(self) -> float:
        """Pair time that warps IL onto the intermediate state."""
        return self.t_hat - 1.0

    @property
    def forward_extrapolation_time(self) -> float:
        """Time (>1) at which the (I0, Ik) pair reaches IL."""
        return 1.0 / self.t_hat

    @property
    def backward_extrapolation_time(self) -> float:
        """Time (<-1) at which the (Ik, IL) pair reaches I0."""
        return 1.0 / (self.t_hat - 1.0)

    @property
    def forward_span(self) -> float:
        """Fraction of global time covered by (I0, Ik)."""
        return self.t_hat

    @property
    def backward_span(self) -> float:
        """Fraction of global time covered by (Ik, IL)."""
        return 1.0 - self.t_hat


def sample_triplet(rng: np.random.Generator, guard: float = DEFAULT_GUARD) -> SampledTriplet:
    """Draw t_hat ~ U(guard, 1-guard).

    The guard band keeps 1/t_hat and 1/(t_hat-1) bounded; unguarded sampling
    lets the extrapolation factors blow up near the interval ends.
    """
    return SampledTriplet(t_hat=float(rng.uniform(guard, 1.0 - guard)))


# ---------------------------------------------------------------------------
# Predictor dispatch
# ---------------------------------------------------------------------------

def predict_displacement(net, x0: torch.Tensor, xl: torch.Tensor, t, span: float = 1.0) -> torch.Tensor:
    if hasattr(net, "displacement"):
        return net.displacement(x0, xl, t)
    return net(x0, xl, t, span)


def _predict_many(net, pairs, times, spans):
    """Evaluate several (pair, t) requests, batching when the pair is shared
    and the predictor is a real network."""
    if hasattr(net, "displacement") and len(pairs) > 1:
        x0 = torch.cat([p[0] for p in pairs], dim=0)
        xl = torch.cat([p[1] for p in pairs], dim=0)
        t = torch.as_tensor(times, device=x0.device, dtype=x0.dtype)
        out = net.displacement(x0, xl, t)
        return [out[i : i + 1] for i in range(len(pairs))]
    return [predict_displacement(net, p[0], p[1], t, s) for p, t, s in zip(pairs, times, spans)]


def _mean_sq(diff: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    """Mean of squared values over masked voxels and the 3 vector components."""
    sq = diff * diff
    if mask is None:
        return sq.mean()
    m = mask.to(sq.dtype)
    total = m.sum() * sq.shape[1]
    if total.item() == 0:
        raise EmptyMaskError("flow loss: mask selects no voxels")
    return (sq * m).sum() / total


def _similarity(a, b, mask, radius, eps=LNCC_EPS):
    return 1.0 - lncc_tensor(a, b, radius=radius, mask=mask, eps=eps)


def _check_unit_interval(name, value):
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie in the open interval (0, 1), got {value}")


def _check_guard(t_k, guard):
    if not guard <= t_k <= 1.0 - guard:
        raise ValueError(
            f"t_k={t_k} is inside the guard band (< {guard} or > {1.0 - guard}); "
            "the extrapolation factor 1/t_k would be unbounded"
        )


# ---------------------------------------------------------------------------
# Loss terms (tensor level)
# ---------------------------------------------------------------------------

def interp_similarity_tensor(
    net, x0, xl, t_hat: float, mask=None, radius: int = DEFAULT_RADIUS, intermediate=None
) -> torch.Tensor:
    """Symmetric intermediate similarity.

    With an observed intermediate image, both endpoints are warped onto it and
    both mismatches count. Without one, the two warped endpoints are compared
    to each other: each is a synthetic stand-in for the intermediate state.
    """
    _check_unit_interval("t_hat", t_hat)
    (phi_t, phi_back) = _predict_many(
        net, [(x0, xl), (x0, xl)], [t_hat, t_hat - 1.0], [1.0, 1.0]
    )
    from_source = warp_tensor(x0, phi_t)
    from_target = warp_tensor(xl, phi_back)
    if intermediate is None:
        return _similarity(from_source, from_target, mask, radius)
    return _similarity(from_source, intermediate, mask, radius) + _similarity(
        from_target, intermediate, mask, radius
    )


def interp_flow_consistency_tensor(
    net, x0, xl, t_k: float, mask=None
) -> torch.Tensor:
    """Composition consistency: going 0->1 then back to t_k must equal going
    0->t_k directly, and symmetrically through the backward full field."""
    _check_unit_interval("t_k", t_k)
    from .torchops import compose_tensor

    phi_t, phi_back, phi_one, phi_minus = _predict_many(
        net,
        [(x0, xl)] * 4,
        [t_k, t_k - 1.0, 1.0, -1.0],
        [1.0] * 4,
    )
    forward = _mean_sq(compose_tensor(phi_one, phi_back) - phi_t, mask)
    backward = _mean_sq(compose_tensor(phi_minus, phi_t) - phi_back, mask)
    return forward + backward


def _synthesize_intermediate(net, x0, xl, t_k):
    """Ik := I0 warped to t_k, detached so the net cannot game its own target."""
    phi_t = predict_displacement(net, x0, xl, t_k, 1.0)
    return warp_tensor(x0, phi_t).detach()


def extrap_similarity_tensor(
    net,
    x0,
    xl,
    t_k: float,
    mask=None,
    radius: int = DEFAULT_RADIUS,
    guard: float = DEFAULT_GUARD,
    intermediate=None,
) -> torch.Tensor:
    """Extrapolation similarity, forward and backward.

    The (I0, Ik) pair evaluated at 1/t_k must reproduce IL; the (Ik, IL) pair
    evaluated at 1/(t_k - 1) must reproduce I0. Fields come from fresh network
    evaluations on the synthesized pair.
    """
    _check_guard(t_k, guard)
    xk = intermediate if intermediate is not None else _synthesize_intermediate(net, x0, xl, t_k)
    triplet = SampledTriplet(t_hat=t_k)
    phi_fwd, phi_bwd = _predict_many(
        net,
        [(x0, xk), (xk, xl)],
        [triplet.forward_extrapolation_time, triplet.backward_extrapolation_time],
        [triplet.forward_span, triplet.backward_span],
    )
    forward = _similarity(warp_tensor(x0, phi_fwd), xl, mask, radius)
    backward = _similarity(warp_tensor(xl, phi_bwd), x0, mask, radius)
    return forward + backward


def extrap_flow_consistency_tensor(
    net, x0, xl, t_k: float, mask=None, guard: float = DEFAULT_GUARD, intermediate=None
) -> torch.Tensor:
    """The extrapolated fields through Ik must agree with the endpoint fields."""
    _check_guard(t_k, guard)
    xk = intermediate if intermediate is not None else _synthesize_intermediate(net, x0, xl, t_k)
    triplet = SampledTriplet(t_hat=t_k)
    phi_one, phi_minus = _predict_many(net, [(x0, xl)] * 2, [1.0, -1.0], [1.0, 1.0])
    phi_fwd, phi_bwd = _predict_many(
        net,
        [(x0, xk), (xk, xl)],
        [triplet.forward_extrapolation_time, triplet.backward_extrapolation_time],
        [triplet.forward_span, triplet.backward_span],
    )
    return _mean_sq(phi_one - phi_fwd, mask) + _mean_sq(phi_minus - phi_bwd, mask)


# ---------------------------------------------------------------------------
# Combined training objective
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    """Per-term weights of the training objective."""

    w_sim_inter: float = 1.0
    w_sim_ext: float = 1.0
    w_flow_inter: float = 2.0
    w_flow_ext: float = 0.03

    def __post_init__(self):
        for name in ("w_sim_inter", "w_sim_ext", "w_flow_inter", "w_flow_ext"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @classmethod
    def for_mode(cls, mode: str) -> "LossWeights":
        if mode == "direct":
            return cls(w_sim_inter=1.0, w_sim_ext=1.0, w_flow_inter=2.0, w_flow_ext=0.03)
        if mode == "diffeomorphic":
            return cls(w_sim_inter=1.0, w_sim_ext=1.0, w_flow_inter=1.25, w_flow_ext=0.025)
        raise ValueError(f"unknown mode {mode!r}")

    @classmethod
    def similarity_only(cls) -> "LossWeights":
        return cls(w_sim_inter=1.0, w_sim_ext=0.0, w_flow_inter=0.0, w_flow_ext=0.0)


def total_training_loss(
    net,
    x0: torch.Tensor,
    xl: torch.Tensor,
    triplets: list[SampledTriplet],
    weights: LossWeights,
    mask=None,
    radius: int = DEFAULT_RADIUS,
):
    """Weighted sum of all four terms, averaged over the sampled triplets.

    Shares the endpoint fields (t=1, t=-1) and the synthesized intermediates
    across terms, batching network evaluations where possible. Returns
    (total, components) with per-term python floats for logging.
    """
    from .torchops import compose_tensor

    n = len(triplets)
    if n == 0:
        raise ValueError("need at least one triplet")
    need_ext = weights.w_sim_ext > 0 or weights.w_flow_ext > 0
    need_endpoints = weights.w_flow_inter > 0 or weights.w_flow_ext > 0

    pairs = []
    times = []
    for tr in triplets:
        pairs += [(x0, xl), (x0, xl)]
        times += [tr.t_hat, tr.backward_time]
    if need_endpoints:
        pairs += [(x0, xl), (x0, xl)]
        times += [1.0, -1.0]
    fields = _predict_many(net, pairs, times, [1.0] * len(pairs))
    phi_t = [fields[2 * i] for i in range(n)]
    phi_back = [fields[2 * i + 1] for i in range(n)]
    phi_one, phi_minus = (fields[-2], fields[-1]) if need_endpoints else (None, None)

    zero = x0.new_zeros(())
    sim_inter = zero.clone()
    flow_inter = zero.clone()
    sim_ext = zero.clone()
    flow_ext = zero.clone()

    warped_src = [warp_tensor(x0, phi_t[i]) for i in range(n)]
    if weights.w_sim_inter > 0:
        for i in range(n):
            warped_tgt = warp_tensor(xl, phi_back[i])
            sim_inter = sim_inter + _similarity(warped_src[i], warped_tgt, mask, radius)
    if weights.w_flow_inter > 0:
        for i in range(n):
            flow_inter = flow_inter + _mean_sq(
                compose_tensor(phi_one, phi_back[i]) - phi_t[i], mask
            )
            flow_inter = flow_inter + _mean_sq(
                compose_tensor(phi_minus, phi_t[i]) - phi_back[i], mask
            )

    if need_ext:
        xks = [warped_src[i].detach() for i in range(n)]
        ext_pairs = []
        ext_times = []
        ext_spans = []
        for i, tr in enumerate(triplets):
            ext_pairs += [(x0, xks[i]), (xks[i], xl)]
            ext_times += [tr.forward_extrapolation_time, tr.backward_extrapolation_time]
            ext_spans += [tr.forward_span, tr.backward_span]
        ext_fields = _predict_many(net, ext_pairs, ext_times, ext_spans)
        for i in range(n):
            phi_fwd, phi_bwd = ext_fields[2 * i], ext_fields[2 * i + 1]
            if weights.w_sim_ext > 0:
                sim_ext = sim_ext + _similarity(warp_tensor(x0, phi_fwd), xl, mask, radius)
                sim_ext = sim_ext + _similarity(warp_tensor(xl, phi_bwd), x0, mask, radius)
            if weights.w_flow_ext > 0:
                flow_ext = flow_ext + _mean_sq(phi_one - phi_fwd, mask)
                flow_ext = flow_ext + _mean_sq(phi_minus - phi_bwd, mask)

    sim_inter, flow_inter, sim_ext, flow_ext = (
        term / n for term in (sim_inter, flow_inter, sim_ext, flow_ext)
    )
    total = (
        weights.w_sim_inter * sim_inter
        + weights.w_flow_inter * flow_inter
        + weights.w_sim_ext * sim_ext
        + weights.w_flow_ext * flow_ext
    )
    components = {
        "sim_inter": float(sim_inter.detach()),
        "flow_inter": float(flow_inter.detach()),
        "sim_ext": float(sim_ext.detach()),
        "flow_ext": float(flow_ext.detach()),
    }
    return total, components


# ---------------------------------------------------------------------------
# Volume-level wrappers
# ---------------------------------------------------------------------------

def _prepare(net, I0: Volume, IL: Volume):
    if I0.dims != IL.dims:
        raise DimensionMismatchError(f"volume dims differ: {I0.dims} vs {IL.dims}")
    dtype = next(net.parameters()).dtype if hasattr(net, "parameters") else torch.float64
    x0 = volume_to_tensor(I0, dtype=dtype)
    xl = volume_to_tensor(IL, dtype=dtype)
    masks = [
        mask_to_tensor(v.mask, dtype=dtype) for v in (I0, IL) if v.mask is not None
    ]
    mask = _union_mask(*masks) if masks else None
    return x0, xl, mask


def interp_similarity(net, I0: Volume, IL: Volume, t_hat: float, intermediate: Volume | None = None) -> float:
    x0, xl, mask = _prepare(net, I0, IL)
    inter = volume_to_tensor(intermediate, dtype=x0.dtype) if intermediate is not None else None
    return float(interp_similarity_tensor(net, x0, xl, t_hat, mask=mask, intermediate=inter))


def interp_flow_consistency(net, I0: Volume, IL: Volume, t_k: float) -> float:
    x0, xl, mask = _prepare(net, I0, IL)
    return float(interp_flow_consistency_tensor(net, x0, xl, t_k, mask=mask))


def extrap_similarity(net, I0: Volume, IL: Volume, t_k: float, intermediate: Volume | None = None) -> float:
    x0, xl, mask = _prepare(net, I0, IL)
    inter = volume_to_tensor(intermediate, dtype=x0.dtype) if intermediate is not None else None
    return float(extrap_similarity_tensor(net, x0, xl, t_k, mask=mask, intermediate=inter))


def extrap_flow_consistency(net, I0: Volume, IL: Volume, t_k: float, intermediate: Volume | None = None) -> float:
    x0, xl, mask = _prepare(net, I0, IL)
    inter = volume_to_tensor(intermediate, dtype=x0.dtype) if intermediate is not None else None
    return float(extrap_flow_consistency_tensor(net, x0, xl, t_k, mask=mask, intermediate=inter))
