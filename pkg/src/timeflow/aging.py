"""Annotation-free aging analyses: inferring the temporal state of a query
scan, prospective aging rates from visit triplets, and retrospective
state-vs-years trajectory fits."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateImageError, FlatObjectiveError, IntervalMismatchError
from .imagegrid import Volume, normalize_intensity
from .losses import lncc_tensor, predict_displacement
from .torchops import mask_to_tensor, volume_to_tensor, warp_tensor

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
COARSE_GRID_POINTS = 32
FLATNESS_THRESHOLD = 1e-4
INTERVAL_TOLERANCE = 0.25
PROSPECTIVE_BOUNDS = (1.0, 8.0)
RETROSPECTIVE_BOUNDS = (0.0, 1.0)


@dataclass
class AgingRecord:
    """One subject's prospective aging estimate."""

    subject_id: str
    t_est: float
    chronological_ratio: float
    rate: float
    diagnosis: str = "unknown"


def _golden_section_max(f, lo: float, hi: float, tol: float = 1e-3) -> float:
    """Argmax of a unimodal f on [lo, hi] to within tol."""
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while abs(b - a) > tol:
        if fc < fd:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
        else:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
    return (a + b) / 2.0


def infer_t(
    net,
    I0: Volume,
    IL: Volume,
    I_query: Volume,
    t_bounds: tuple[float, float] = RETROSPECTIVE_BOUNDS,
    tol: float = 1e-3,
    grid_points: int = COARSE_GRID_POINTS,
) -> float:
    """Time at which the predicted deformation best explains the query scan.

    Maximizes lncc(warp(I0, phi_t), I_query) over t: a coarse grid seeds a
    golden-section refinement so local optima along the trajectory do not trap
    the search. Raises FlatObjectiveError when the objective cannot tell
    timepoints apart (temporally indistinguishable inputs).
    """
    lo, hi = float(t_bounds[0]), float(t_bounds[1])
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ValueError(f"bad t_bounds {t_bounds}")

    v0 = normalize_intensity(I0)
    vl = normalize_intensity(IL)
    vq = normalize_intensity(I_query)
    dtype = next(net.parameters()).dtype if hasattr(net, "parameters") else torch.float64
    x0 = volume_to_tensor(v0, dtype=dtype)
    xl = volume_to_tensor(vl, dtype=dtype)
    xq = volume_to_tensor(vq, dtype=dtype)
    union = I0.foreground() | IL.foreground() | I_query.foreground()
    mask = mask_to_tensor(union, dtype=dtype)

    def objective(t: float) -> float:
        with torch.no_grad():
            phi = predict_displacement(net, x0, xl, float(t), 1.0)
            return float(lncc_tensor(warp_tensor(x0, phi), xq, mask=mask))

    grid = np.linspace(lo, hi, grid_points)
    values = np.array([objective(t) for t in grid])
    if values.max() - values.min() < FLATNESS_THRESHOLD:
        raise FlatObjectiveError(
            "timepoints are indistinguishable: the similarity objective is flat "
            f"(range {values.max() - values.min():.2e} over [{lo}, {hi}])"
        )
    best = int(values.argmax())
    bracket_lo = grid[max(best - 1, 0)]
    bracket_hi = grid[min(best + 1, grid_points - 1)]
    return float(_golden_section_max(objective, float(bracket_lo), float(bracket_hi), tol=tol))


def prospective_rate(net, triplet, subject_id: str = "", diagnosis: str = "unknown") -> AgingRecord:
    """Brain aging rate from three visits: register the first two, infer the
    extrapolated time of the third, divide by the chronological ratio.

    `triplet` is ((V0, tau0), (V1, tau1), (V2, tau2)) with strictly increasing
    ages whose consecutive intervals match within 25% (rates are only
    comparable when the extrapolation spans a similar stretch of time).
    """
    (v0, tau0), (v1, tau1), (v2, tau2) = triplet
    if not tau0 < tau1 < tau2:
        raise ValueError(f"ages must increase: {tau0}, {tau1}, {tau2}")
    first, second = tau1 - tau0, tau2 - tau1
    if abs(second - first) > INTERVAL_TOLERANCE * first:
        raise IntervalMismatchError(
            f"visit intervals differ too much ({first:.3g} vs {second:.3g} years)"
        )
    t_est = infer_t(net, v0, v1, v2, t_bounds=PROSPECTIVE_BOUNDS)
    ratio = (tau2 - tau0) / (tau1 - tau0)
    return AgingRecord(
        subject_id=subject_id,
        t_est=t_est,
        chronological_ratio=ratio,
        rate=t_est / ratio,
        diagnosis=diagnosis,
    )


def retrospective_fit(points) -> tuple[float, float]:
    """Least-squares line through (years_since_baseline, t_est) points.

    Returns (slope, intercept); a steeper slope means faster anatomical change
    per chronological year.
    """
    pts = [(float(t), float(y)) for t, y in points]
    if len(pts) < 2:
        raise ValueError("need at least two points to fit a line")
    t_est = np.array([p[0] for p in pts])
    years = np.array([p[1] for p in pts])
    if np.ptp(years) == 0:
        raise DegenerateImageError("degenerate fit: no variance in years")
    slope, intercept = np.polyfit(years, t_est, deg=1)
    return float(slope), float(intercept)


def retrospective_states(net, series) -> list[tuple[float, float]]:
    """(t_est, years_since_baseline) for every intermediate+final visit of a
    series, using (first, last) as the registration pair."""
    vols = series.volumes
    ages = series.ages
    points = []
    for k in range(1, len(vols)):
        t_est = infer_t(net, vols[0], vols[-1], vols[k], t_bounds=RETROSPECTIVE_BOUNDS)
        points.append((t_est, ages[k] - ages[0]))
    return points


def cohort_band(values, lo_pct: float = 40.0, hi_pct: float = 60.0):
    """Median with a percentile ribbon, the group summary used for trajectories."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValueError("empty cohort")
    return (
        float(np.median(arr)),
        float(np.percentile(arr, lo_pct)),
        float(np.percentile(arr, hi_pct)),
    )
