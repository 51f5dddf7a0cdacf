"""Series loading, imputation, min-max scaling and sliding-window datasets."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

# 48 of the 61 recorded days are used for training
TRAIN_FRACTION = 48 / 61


class DataError(ValueError):
    pass


@dataclass
class Series:
    """Regularly sampled values; ``nan`` marks a missing reading."""

    values: np.ndarray
    road_id: str = "synthetic"
    interval_minutes: int = 10
    start: datetime | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise DataError("series values must be one-dimensional")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def missing_rate(self) -> float:
        return float(np.mean(np.isnan(self.values))) if len(self) else 0.0


def impute_missing(series: Series) -> Series:
    """Linear interpolation inside, nearest present value at the edges."""
    v = series.values
    present = ~np.isnan(v)
    if not present.any():
        raise DataError(f"series {series.road_id!r} has no observed values")
    if present.all():
        filled = v.copy()
    else:
        idx = np.arange(len(v))
        # np.interp clamps to the end values outside the observed range
        filled = np.interp(idx, idx[present], v[present])
    return Series(filled, series.road_id, series.interval_minutes, series.start)


@dataclass(frozen=True)
class NormStats:
    min: float
    max: float

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(float(d["min"]), float(d["max"]))


def fit_norm(values) -> NormStats:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(np.min(v)), float(np.max(v))
    if not hi > lo:
        raise DataError(f"cannot min-max scale a constant series (value {lo})")
    return NormStats(lo, hi)


def normalize(values, stats: NormStats | None = None) -> tuple[np.ndarray, NormStats]:
    v = np.asarray(values, dtype=np.float64)
    if stats is None:
        stats = fit_norm(v)
    return (v - stats.min) / (stats.max - stats.min), stats


def denormalize(values, stats: NormStats) -> np.ndarray:
    return np.asarray(values, dtype=np.float64) * (stats.max - stats.min) + stats.min


@dataclass(frozen=True)
class WindowConfig:
    t: int = 6
    r: int = 6
    s: int = 1

    def __post_init__(self):
        for key in ("t", "r", "s"):
            if getattr(self, key) < 1:
                raise ValueError(f"window {key} must be >= 1, got {getattr(self, key)}")


def window_count(length: int, cfg: WindowConfig) -> int:
    if length < cfg.t + cfg.r:
        return 0
    return (length - cfg.t - cfg.r) // cfg.s + 1


@dataclass
class WindowedDataset:
    inputs: np.ndarray  # [N, t]
    targets: np.ndarray  # [N, r]
    stats: NormStats | None = None
    starts: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.inputs)

    @property
    def t(self) -> int:
        return self.inputs.shape[1]

    @property
    def r(self) -> int:
        return self.targets.shape[1]

    def subset(self, idx) -> "WindowedDataset":
        return WindowedDataset(self.inputs[idx], self.targets[idx], self.stats, self.starts[idx])

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.inputs).tobytes())
        h.update(np.ascontiguousarray(self.targets).tobytes())
        return h.hexdigest()


def sliding_windows(values, cfg: WindowConfig, stats: NormStats | None = None) -> WindowedDataset:
    """Window ``i`` reads ``values[s*i : s*i+t]`` and targets the next ``r`` values."""
    v = np.asarray(values.values if isinstance(values, Series) else values, dtype=np.float64)
    n = window_count(len(v), cfg)
    if n == 0:
        raise DataError(f"series of length {len(v)} is shorter than t + r = {cfg.t + cfg.r}")
    starts = np.arange(n) * cfg.s
    inputs = v[starts[:, None] + np.arange(cfg.t)]
    targets = v[starts[:, None] + cfg.t + np.arange(cfg.r)]
    return WindowedDataset(inputs, targets, stats, starts)


def train_test_split(values, fraction: float = TRAIN_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    v = np.asarray(values.values if isinstance(values, Series) else values)
    if not 0 < fraction < 1:
        raise ValueError("training fraction must lie in (0, 1)")
    cut = int(math.floor(len(v) * fraction))
    return v[:cut], v[cut:]


@dataclass
class PreparedData:
    train: WindowedDataset
    test: WindowedDataset
    stats: NormStats
    series: Series


def prepare(series: Series, cfg: WindowConfig, fraction: float = TRAIN_FRACTION) -> PreparedData:
    """Impute, split chronologically, scale with training statistics, then window each part."""
    filled = impute_missing(series)
    train_raw, test_raw = train_test_split(filled.values, fraction)
    stats = fit_norm(train_raw)
    train_n, _ = normalize(train_raw, stats)
    test_n, _ = normalize(test_raw, stats)
    return PreparedData(
        sliding_windows(train_n, cfg, stats), sliding_windows(test_n, cfg, stats), stats, filled
    )


def load_csv(path, road_id: str) -> Series:
    """Read ``timestamp,road_id,speed`` rows for one road onto a regular grid.

    Missing grid slots and empty speed cells become ``nan``.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    rows: dict[datetime, float] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["timestamp", "road_id", "speed"]:
            raise DataError(f"{path}:1: expected header timestamp,road_id,speed, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            ts, road, speed = (c.strip() for c in row)
            try:
                when = datetime.fromisoformat(ts)
                value = float(speed) if speed else math.nan
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if road != road_id:
                continue
            if when in rows:
                raise DataError(f"{path}:{lineno}: duplicate timestamp {ts}")
            rows[when] = value
    if not rows:
        raise DataError(f"{path}: no rows for road {road_id!r}")
    stamps = sorted(rows)
    if len(stamps) == 1:
        return Series(np.array([rows[stamps[0]]]), road_id, 10, stamps[0])
    gaps = np.array([(b - a).total_seconds() for a, b in zip(stamps, stamps[1:])])
    step = float(np.min(gaps))
    if step <= 0 or np.any(np.abs(gaps / step - np.round(gaps / step)) > 1e-9):
        raise DataError(f"{path}: timestamps for {road_id!r} are not on a regular grid")
    n = int(round((stamps[-1] - stamps[0]).total_seconds() / step)) + 1
    values = np.full(n, math.nan)
    for when in stamps:
        values[int(round((when - stamps[0]).total_seconds() / step))] = rows[when]
    minutes = step / 60.0
    return Series(values, road_id, int(minutes) if minutes == int(minutes) else minutes, stamps[0])


SYNTH_KINDS = ("sine", "sine+trend", "sine+noise")


def synth_series(kind: str = "sine+noise", length: int = 6000, period: float = 144,
                 noise_std: float = 0.05, seed: int = 0, trend: float = 0.2) -> Series:
    """``0.5 + 0.4 sin(2 pi k / period)`` plus an optional linear trend and Gaussian noise.

    ``trend`` is the total rise over the series; ``noise_std`` applies to the
    noisy kind only.
    """
    if kind not in SYNTH_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}; choose from {SYNTH_KINDS}")
    if length < 1:
        raise ValueError("length must be >= 1")
    if period < 2:
        raise ValueError("period must be >= 2")
    k = np.arange(length)
    values = 0.5 + 0.4 * np.sin(2.0 * np.pi * k / period)
    if kind == "sine+trend":
        values = values + trend * k / max(length - 1, 1)
    elif kind == "sine+noise":
        values = values + np.random.default_rng(seed).normal(0.0, noise_std, size=length)
    return Series(values, f"synthetic-{kind}", 10)
