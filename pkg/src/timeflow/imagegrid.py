"""Volume representation, intensity normalization, NIfTI ingestion, and the
synthetic longitudinal atrophy phantom used as ground-truth test data."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import nifti
from .errors import DegenerateImageError, DimensionMismatchError, FormatError

Diagnosis = str  # one of "CN", "MCI", "Dementia", "unknown"


@dataclass
class Volume:
    """3D scalar intensity grid with voxel spacing, world origin, and foreground mask.

    `data` is indexed (D, H, W); `mask` marks foreground brain voxels and always
    shares the data dims.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise FormatError(f"Volume data must be 3D, got {self.data.ndim}D")
        if not np.all(np.isfinite(self.data)):
            raise DegenerateImageError("volume contains non-finite intensities")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.data.shape:
                raise DimensionMismatchError(
                    f"mask dims {self.mask.shape} != data dims {self.data.shape}"
                )

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def foreground(self) -> np.ndarray:
        """Mask if present, else all-true."""
        if self.mask is not None:
            return self.mask
        return np.ones(self.data.shape, dtype=bool)

    def with_data(self, data: np.ndarray) -> "Volume":
        return replace(self, data=np.asarray(data, dtype=np.float64))


@dataclass
class LongitudinalSeries:
    """Ordered visits of one subject: (volume, chronological age in years, diagnosis)."""

    subject_id: str
    visits: list[tuple[Volume, float, Diagnosis]]

    def __post_init__(self):
        if len(self.visits) < 2:
            raise ValueError("a longitudinal series needs at least two visits")
        ages = [age for _, age, _ in self.visits]
        if any(b <= a for a, b in zip(ages, ages[1:])):
            raise ValueError(f"visit ages must be strictly increasing, got {ages}")

    @property
    def ages(self) -> list[float]:
        return [age for _, age, _ in self.visits]

    @property
    def volumes(self) -> list[Volume]:
        return [vol for vol, _, _ in self.visits]

    def first_last(self) -> tuple[Volume, Volume]:
        return self.visits[0][0], self.visits[-1][0]


def foreground_mask(data: np.ndarray) -> np.ndarray:
    """Positive-intensity voxels, morphologically closed with a radius-1 element."""
    raw = np.asarray(data) > 0
    if not raw.any():
        return raw
    structure = ndimage.generate_binary_structure(3, 1)
    return ndimage.binary_closing(raw, structure=structure)


def load_nifti(path: str) -> Volume:
    """Read a single-channel 3D NIfTI-1/2 file into a Volume.

    The foreground mask is derived from positive intensities (skull-stripped
    input assumed) with a radius-1 morphological closing.
    """
    data, spacing, origin = nifti.read(path)
    if data.ndim != 3:
        # trailing singleton dims (e.g. a lazily written (D,H,W,1)) still count as 3D
        squeezed = np.squeeze(data)
        if squeezed.ndim != 3:
            raise FormatError(f"{path}: expected a 3D volume, got shape {data.shape}")
        data = squeezed
    return Volume(data=data, spacing=spacing, origin=origin, mask=foreground_mask(data))


def save_nifti(volume: Volume, path: str) -> None:
    nifti.write(path, volume.data, spacing=volume.spacing, origin=volume.origin)


def normalize_intensity(volume: Volume) -> Volume:
    """Affinely rescale so the foreground [0th, 99.9th] percentile range maps to [0, 1].

    Values above the 99.9th percentile end up slightly above 1 and are kept
    (no clipping). Percentiles are computed over foreground voxels only.
    """
    fg = volume.foreground()
    values = volume.data[fg]
    if values.size == 0:
        raise DegenerateImageError("cannot normalize: empty foreground")
    p_lo = float(np.percentile(values, 0.0))
    p_hi = float(np.percentile(values, 99.9))
    if p_hi <= p_lo:
        raise DegenerateImageError(
            f"degenerate intensity range: p0={p_lo}, p99.9={p_hi}"
        )
    return volume.with_data((volume.data - p_lo) / (p_hi - p_lo))


# ---------------------------------------------------------------------------
# Synthetic atrophy phantom
# ---------------------------------------------------------------------------

@dataclass
class PhantomSpec:
    """Parameters of the two-tissue ellipsoid brain phantom.

    The "brain" is an ellipsoid of bright tissue containing a darker ellipsoidal
    "ventricle" that expands radially over time; the expansion displacement is
    known in closed form, which is what makes the phantom an oracle.
    """

    dims: tuple[int, int, int] = (48, 48, 48)
    brain_radii: tuple[float, float, float] = (20.0, 19.0, 21.0)
    ventricle_radii: tuple[float, float, float] = (7.0, 6.0, 7.5)
    center_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    tissue_level: float = 0.6
    ventricle_level: float = 0.12
    texture_amp: float = 0.12
    texture_scale: float = 3.0
    edge_softness: float = 1.2
    expansion_sigma: float = 4.5
    atrophy_rate: float = 1.0  # ventricle-expansion voxels per year
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")
        if self.atrophy_rate < 0:
            raise ValueError("atrophy_rate must be >= 0")


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3.0 - 2.0 * x)


def _ellipsoid_profile(coords, center, radii, softness):
    """1 inside the ellipsoid, 0 outside, smooth over ~softness voxels."""
    r = np.sqrt(sum(((c - mu) / rad) ** 2 for c, mu, rad in zip(coords, center, radii)))
    # convert the normalized iso-level into an approximate voxel distance
    mean_rad = float(np.mean(radii))
    return _smoothstep((1.0 - r) * mean_rad / softness + 0.5)


def _phantom_base(spec: PhantomSpec, rng: np.random.Generator):
    """Baseline image, its center, and the unit expansion field (one voxel/year·rate)."""
    coords = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in spec.dims), indexing="ij")
    center = [n / 2.0 + off for n, off in zip(spec.dims, spec.center_offset)]

    brain = _ellipsoid_profile(coords, center, spec.brain_radii, spec.edge_softness)
    ventricle = _ellipsoid_profile(coords, center, spec.ventricle_radii, spec.edge_softness)

    texture = rng.standard_normal(spec.dims)
    texture = ndimage.gaussian_filter(texture, spec.texture_scale)
    tmax = np.abs(texture).max()
    if tmax > 0:
        texture *= spec.texture_amp / tmax

    tissue = spec.tissue_level * (1.0 + texture)
    base = brain * (tissue * (1.0 - ventricle) + spec.ventricle_level * ventricle)
    base = np.clip(base, 0.0, None)

    # radial inward pull concentrated at the ventricle boundary; vanishes toward
    # both the center and the brain edge so the skull line stays put
    offs = [c - mu for c, mu in zip(coords, center)]
    r = np.sqrt(sum(o ** 2 for o in offs))
    r_safe = np.maximum(r, 1e-9)
    rv = float(np.mean(spec.ventricle_radii))
    bump = np.exp(-((r - rv) ** 2) / (2.0 * spec.expansion_sigma ** 2))
    ramp = r ** 2 / (r ** 2 + 4.0)  # keeps the field C1 at the center
    magnitude = bump * ramp
    unit_field = np.stack([-magnitude * o / r_safe for o in offs], axis=-1)
    return base, unit_field


def phantom_expansion_field(spec: PhantomSpec, delta_years: float) -> np.ndarray:
    """Closed-form displacement (D,H,W,3) of the phantom after `delta_years`."""
    rng = np.random.default_rng(spec.seed)
    _, unit_field = _phantom_base(spec, rng)
    return spec.atrophy_rate * delta_years * unit_field


def generate_phantom_series(
    spec: PhantomSpec,
    times: list[float],
    subject_id: str = "phantom",
    diagnosis: Diagnosis = "unknown",
    anatomical_times: list[float] | None = None,
):
    """Generate a longitudinal series plus the exact ground-truth fields.

    Each visit is the baseline phantom warped by the analytic expansion field
    scaled by atrophy_rate x elapsed years, with optional foreground noise.
    `anatomical_times` decouples tissue change from the chronological `times`
    stored on the series (used to synthesize accelerated-atrophy cohorts);
    it defaults to `times`. Deterministic for a fixed spec.

    Returns (series, fields) where fields[i] is the displacement taking the
    first visit to visit i (fields[0] is identically zero).
    """
    from .warpfield import DisplacementField, warp  # local import to avoid a cycle

    times = [float(t) for t in times]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError(f"times must be increasing, got {times}")
    anat = [float(t) for t in (anatomical_times if anatomical_times is not None else times)]
    if len(anat) != len(times):
        raise ValueError("anatomical_times must match times in length")

    rng = np.random.default_rng(spec.seed)
    base, unit_field = _phantom_base(spec, rng)
    base_mask = foreground_mask(base)
    base_vol = Volume(base, mask=base_mask)

    visits = []
    fields = []
    for t_chron, t_anat in zip(times, anat):
        scale = spec.atrophy_rate * (t_anat - anat[0])
        u = scale * unit_field
        fields.append(DisplacementField(u))
        if scale == 0.0:
            vol = Volume(base.copy(), mask=base_mask.copy())
        else:
            vol = warp(base_vol, DisplacementField(u))
        if spec.noise_sigma > 0:
            noise = rng.normal(0.0, spec.noise_sigma, size=spec.dims)
            data = vol.data + noise * vol.mask
            vol = Volume(np.clip(data, 0.0, None), mask=vol.mask)
        visits.append((vol, t_chron, diagnosis))

    series = LongitudinalSeries(subject_id=subject_id, visits=visits)
    return series, fields


def jittered_spec(template: PhantomSpec, rng: np.random.Generator) -> PhantomSpec:
    """Per-subject anatomy variation around a template spec."""
    scale = lambda v, lo, hi: tuple(x * rng.uniform(lo, hi) for x in v)
    return replace(
        template,
        brain_radii=scale(template.brain_radii, 0.92, 1.08),
        ventricle_radii=scale(template.ventricle_radii, 0.85, 1.15),
        center_offset=tuple(rng.uniform(-1.5, 1.5) for _ in range(3)),
        tissue_level=template.tissue_level * rng.uniform(0.92, 1.08),
        atrophy_rate=template.atrophy_rate * rng.uniform(0.9, 1.1),
        seed=int(rng.integers(0, 2**31 - 1)),
    )


def generate_phantom_cohort(
    n_subjects: int,
    times: list[float],
    template: PhantomSpec,
    seed: int = 0,
    diagnosis: Diagnosis = "unknown",
    anatomical_times: list[float] | None = None,
    id_prefix: str = "sub",
):
    """List of (series, fields) pairs with jittered per-subject anatomy."""
    rng = np.random.default_rng(seed)
    cohort = []
    for i in range(n_subjects):
        spec = jittered_spec(template, rng)
        cohort.append(
            generate_phantom_series(
                spec,
                times,
                subject_id=f"{id_prefix}{i:03d}",
                diagnosis=diagnosis,
                anatomical_times=anatomical_times,
            )
        )
    return cohort


# ---------------------------------------------------------------------------
# Series manifests
# ---------------------------------------------------------------------------

MANIFEST_COLUMNS = ("subject_id", "path", "age_years", "diagnosis")


def write_manifest(rows: list[dict], path: str) -> None:
    """Write a visit table (subject_id, path, age_years, diagnosis) as CSV or JSON."""
    if str(path).endswith(".json"):
        with open(path, "w") as fh:
            json.dump(rows, fh, indent=2)
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in MANIFEST_COLUMNS})


def read_manifest(path: str) -> list[LongitudinalSeries]:
    """Load per-subject series from a manifest; volumes are read and normalized."""
    if str(path).endswith(".json"):
        with open(path) as fh:
            rows = json.load(fh)
    else:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    base_dir = os.path.dirname(os.path.abspath(path))
    by_subject: dict[str, list] = {}
    for row in rows:
        vol_path = row["path"]
        if not os.path.isabs(vol_path):
            vol_path = os.path.join(base_dir, vol_path)
        vol = normalize_intensity(load_nifti(vol_path))
        by_subject.setdefault(str(row["subject_id"]), []).append(
            (vol, float(row["age_years"]), str(row.get("diagnosis", "unknown")))
        )
    series = []
    for subject_id, visits in by_subject.items():
        visits.sort(key=lambda v: v[1])
        series.append(LongitudinalSeries(subject_id=subject_id, visits=visits))
    series.sort(key=lambda s: s.subject_id)
    return series
