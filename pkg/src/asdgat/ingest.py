"""Cohort manifests, ROI time-series I/O, preprocessing and synthetic cohorts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, ConfigError


@dataclass(frozen=True)
class Subject:
    id: str
    label: int
    path: str


@dataclass
class CohortManifest:
    n_regions: int
    subjects: list[Subject]
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        if self.n_regions < 2:
            raise DataError(f"n_regions must be >= 2, got {self.n_regions}")
        seen = set()
        for s in self.subjects:
            if s.id in seen:
                raise DataError(f"duplicate subject: {s.id}")
            seen.add(s.id)
            if s.label not in (0, 1):
                raise DataError(f"unknown label {s.label!r} for subject {s.id}")

    @property
    def label_counts(self) -> dict[int, int]:
        counts = {0: 0, 1: 0}
        for s in self.subjects:
            counts[s.label] += 1
        return counts

    def resolve(self, subject: Subject) -> Path:
        p = Path(subject.path)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        return {
            "n_regions": self.n_regions,
            "subjects": [{"id": s.id, "label": s.label, "path": s.path} for s in self.subjects],
        }


def load_manifest(path) -> CohortManifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        raw = json.loads(path.read_text())
        subjects = [Subject(str(s["id"]), s["label"], str(s["path"])) for s in raw["subjects"]]
        n_regions = int(raw["n_regions"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from None
    return CohortManifest(n_regions, subjects, root=path.parent)


def save_manifest(manifest: CohortManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")


def read_timeseries(path, n_regions: int | None = None) -> np.ndarray:
    """Read a T x R CSV; ``nan`` (any case) marks a missing value."""
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        try:
            rows.append([float(tok) for tok in line.split(",")])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric field") from None
    if not rows:
        raise DataError(f"{path}: empty time series")
    width = {len(r) for r in rows}
    if len(width) != 1:
        raise DataError(f"{path}: ragged rows")
    ts = np.array(rows, dtype=np.float64)
    if n_regions is not None and ts.shape[1] != n_regions:
        raise DataError(f"{path}: expected {n_regions} regions, found {ts.shape[1]}")
    return ts


def write_timeseries(ts: np.ndarray, path) -> None:
    # repr round-trips float64 exactly
    lines = (",".join("nan" if np.isnan(v) else repr(float(v)) for v in row) for row in ts)
    Path(path).write_text("\n".join(lines) + "\n")


def impute_missing(ts: np.ndarray) -> np.ndarray:
    """Replace missing entries with 0.0."""
    out = np.array(ts, dtype=np.float64, copy=True)
    out[np.isnan(out)] = 0.0
    return out


def zscore_normalize(ts: np.ndarray) -> np.ndarray:
    """Column-wise z-score with the population standard deviation.

    Zero-variance columns become all zeros.
    """
    ts = np.asarray(ts, dtype=np.float64)
    if ts.shape[0] < 2:
        raise DataError("z-scoring needs at least two time points")
    mu = ts.mean(axis=0)
    centered = ts - mu
    sd = np.sqrt((centered**2).mean(axis=0))
    out = np.zeros_like(ts)
    ok = sd > 1e-12 * np.maximum(1.0, np.abs(mu))
    out[:, ok] = centered[:, ok] / sd[ok]
    return out


def preprocess(ts: np.ndarray) -> np.ndarray:
    return zscore_normalize(impute_missing(ts))


@dataclass(frozen=True)
class SyntheticCohortSpec:
    n_subjects_per_class: int = 50
    n_regions: int = 20
    n_timepoints: int = 200
    planted_block: tuple[int, ...] = (0, 1, 2, 3, 4)
    coupling_strength: float = 0.8
    noise_sigma: float = 1.0
    seed: int = 0
    ar_coefficient: float = 0.5

    def validate(self) -> None:
        if self.n_subjects_per_class < 1 or self.n_regions < 2 or self.n_timepoints < 2:
            raise ConfigError("synthetic cohort sizes must be positive (regions, timepoints >= 2)")
        if any(not 0 <= b < self.n_regions for b in self.planted_block):
            raise ConfigError("planted_block index out of range")
        if len(set(self.planted_block)) != len(self.planted_block):
            raise ConfigError("planted_block has duplicates")
        # 0 is admitted as the no-signal control
        if not 0.0 <= self.coupling_strength < 1.0:
            raise ConfigError("coupling_strength must lie in [0, 1)")
        if self.noise_sigma <= 0:
            raise ConfigError("noise_sigma must be positive")
        if not -1.0 < self.ar_coefficient < 1.0:
            raise ConfigError("ar_coefficient must lie in (-1, 1)")


def _ar1(rng: np.random.Generator, n: int, phi: float) -> np.ndarray:
    """Unit-variance stationary AR(1) series."""
    eps = rng.standard_normal(n)
    z = np.empty(n)
    z[0] = eps[0]
    innov = np.sqrt(1.0 - phi * phi)
    for t in range(1, n):
        z[t] = phi * z[t - 1] + innov * eps[t]
    return z


def synthetic_subject(spec: SyntheticCohortSpec, index: int, label: int) -> np.ndarray:
    """Time series for one subject; depends only on (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    ts = spec.noise_sigma * rng.standard_normal((spec.n_timepoints, spec.n_regions))
    if label == 1 and spec.coupling_strength > 0:
        latent = _ar1(rng, spec.n_timepoints, spec.ar_coefficient)
        block = list(spec.planted_block)
        ts[:, block] += spec.coupling_strength * latent[:, None]
    return ts


def generate_synthetic_cohort(spec: SyntheticCohortSpec) -> tuple[CohortManifest, dict[str, np.ndarray]]:
    """Build a balanced cohort; class-1 subjects share a latent signal across the planted block."""
    spec.validate()
    subjects, series = [], {}
    n = spec.n_subjects_per_class
    for k in range(2 * n):
        label = int(k >= n)
        sid = f"sub-{k:04d}"
        subjects.append(Subject(sid, label, f"timeseries/{sid}.csv"))
        series[sid] = synthetic_subject(spec, k, label)
    return CohortManifest(spec.n_regions, subjects), series


def write_synthetic_cohort(spec: SyntheticCohortSpec, out_dir) -> CohortManifest:
    out_dir = Path(out_dir)
    (out_dir / "timeseries").mkdir(parents=True, exist_ok=True)
    manifest, series = generate_synthetic_cohort(spec)
    for s in manifest.subjects:
        write_timeseries(series[s.id], out_dir / s.path)
    manifest.root = out_dir
    save_manifest(manifest, out_dir / "manifest.json")
    return manifest


def load_subject(manifest: CohortManifest, subject: Subject) -> np.ndarray:
    """Read and preprocess (impute, then z-score) one subject's series."""
    path = manifest.resolve(subject)
    if not path.is_file():
        raise DataError(f"time series not found: {path}")
    return preprocess(read_timeseries(path, manifest.n_regions))
