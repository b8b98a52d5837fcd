"""Surge residuals, standardization, windowing and the chronological split."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import AlignmentError, ConfigError, DataError
from .series import (
    GridSeries, HourlySeries, format_time, hours_since_epoch, parse_time,
)


def compute_surge(gauge: HourlySeries, harmonic: HourlySeries) -> HourlySeries:
    """Surge = observed level - harmonic tide, on identical timestamps."""
    a, b = gauge.timestamps, harmonic.timestamps
    if a.shape != b.shape or not np.array_equal(a, b):
        n = min(a.size, b.size)
        mismatch = np.flatnonzero(a[:n] != b[:n])
        i = int(mismatch[0]) if mismatch.size else n
        left = format_time(a[i]) if i < a.size else "<end>"
        right = format_time(b[i]) if i < b.size else "<end>"
        raise AlignmentError(f"series misaligned at index {i}: gauge {left} vs harmonic {right}")
    return HourlySeries(a.copy(), gauge.values - harmonic.values, station_id=gauge.station_id)


@dataclass
class Standardizer:
    """Per-channel atmospheric z-scores plus one scalar z-score for water levels.

    The level statistics are shared by the tidal input and the target so both
    live on the same scale.
    """

    atmos_mean: np.ndarray
    atmos_std: np.ndarray
    level_mean: float
    level_std: float

    @classmethod
    def fit(cls, atmos: np.ndarray, levels: np.ndarray) -> "Standardizer":
        if atmos.size == 0 or levels.size == 0:
            raise ConfigError("cannot fit a standardizer on an empty training partition")
        axes = tuple(range(atmos.ndim - 1))
        mean = atmos.mean(axis=axes, dtype=np.float64)
        std = atmos.std(axis=axes, dtype=np.float64)
        lmean = float(np.mean(levels, dtype=np.float64))
        lstd = float(np.std(levels, dtype=np.float64))
        if np.any(std <= 0) or lstd <= 0:
            raise ConfigError(f"zero-variance channel in training data (atmos std {std.tolist()}, level std {lstd})")
        return cls(mean, std, lmean, lstd)

    def atmos(self, x: np.ndarray, dtype=np.float64) -> np.ndarray:
        out = np.asarray(x, dtype=dtype) - self.atmos_mean.astype(dtype)
        out /= self.atmos_std.astype(dtype)
        return out

    def level(self, y: np.ndarray, dtype=np.float64) -> np.ndarray:
        return ((np.asarray(y, dtype=np.float64) - self.level_mean) / self.level_std).astype(dtype)

    def invert_level(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64) * self.level_std + self.level_mean

    def to_dict(self) -> dict:
        return {"atmos_mean": self.atmos_mean.tolist(), "atmos_std": self.atmos_std.tolist(),
                "level_mean": self.level_mean, "level_std": self.level_std}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["atmos_mean"], dtype=np.float64), np.asarray(d["atmos_std"], dtype=np.float64),
                   float(d["level_mean"]), float(d["level_std"]))

    def __eq__(self, other) -> bool:
        return isinstance(other, Standardizer) and self.to_dict() == other.to_dict()


@dataclass
class WindowReport:
    common_hours: int
    candidates: int
    kept: int

    @property
    def dropped(self) -> int:
        return self.candidates - self.kept


@dataclass
class SampleSet:
    """Windows of atmospheric input, tidal input and total-water-level target.

    Arrays are physical units: ``atmos (N, T, H, W, C)`` float32, the rest
    ``(N, T, 1)`` float64 meters. ``target`` is built as ``tide + surge``.
    """

    atmos: np.ndarray
    tide: np.ndarray
    surge: np.ndarray
    starts: np.ndarray
    steps: int
    standardizer: Standardizer | None = None
    report: WindowReport | None = None
    target: np.ndarray = field(init=False)

    def __post_init__(self):
        n = len(self.starts)
        for name in ("atmos", "tide", "surge"):
            arr = getattr(self, name)
            if arr.shape[0] != n or arr.shape[1] != self.steps:
                raise DataError(f"{name} has shape {arr.shape}, expected ({n}, {self.steps}, ...)")
        self.target = self.tide + self.surge
        self._cache = {}

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def ends(self) -> np.ndarray:
        return self.starts + np.timedelta64(self.steps - 1, "h")

    def subset(self, index) -> "SampleSet":
        index = np.asarray(index)
        return SampleSet(self.atmos[index], self.tide[index], self.surge[index], self.starts[index],
                         self.steps, self.standardizer)

    def with_standardizer(self, standardizer: Standardizer) -> "SampleSet":
        return SampleSet(self.atmos, self.tide, self.surge, self.starts, self.steps, standardizer, self.report)

    def standardized(self, dtype=np.float64):
        """``(atmos, tide, target)`` z-scored with the attached standardizer."""
        if self.standardizer is None:
            raise ConfigError("sample set has no standardizer; call standardize_fit_apply first")
        key = np.dtype(dtype).str
        if key not in self._cache:
            s = self.standardizer
            self._cache[key] = (s.atmos(self.atmos, dtype), s.level(self.tide, dtype), s.level(self.target, dtype))
        return self._cache[key]

    def hourly_index(self) -> np.ndarray:
        """``(N, T)`` timestamps covered by each window."""
        return self.starts[:, None] + np.arange(self.steps) * np.timedelta64(1, "h")


def standardize_fit_apply(train: SampleSet, *others: SampleSet):
    """Fit on ``train`` only and attach the result to every partition.

    Returns ``([train, *others], standardizer)``.
    """
    if len(train) == 0:
        raise ConfigError("training partition is empty")
    std = Standardizer.fit(train.atmos, train.target)
    return [s.with_standardizer(std) for s in (train, *others)], std


def _presence(ts: np.ndarray, origin: int, length: int) -> tuple[np.ndarray, np.ndarray]:
    """Mask of present hours in ``[origin, origin + length)`` and the row index per hour."""
    hrs = hours_since_epoch(ts) - origin
    keep = (hrs >= 0) & (hrs < length)
    mask = np.zeros(length, dtype=bool)
    rows = np.full(length, -1, dtype=np.int64)
    mask[hrs[keep]] = True
    rows[hrs[keep]] = np.flatnonzero(keep)
    return mask, rows


def window_starts(grid: GridSeries, gauge: HourlySeries, harmonic: HourlySeries, steps: int, stride: int):
    """Valid window start hours over the common span plus a count report.

    Returns ``(origin_hour, start_offsets, rows_grid, rows_gauge, rows_harmonic, report)``.
    """
    if steps < 1 or stride < 1:
        raise ConfigError(f"window length and stride must be >= 1, got T={steps}, stride={stride}")
    series = [grid.timestamps, gauge.timestamps, harmonic.timestamps]
    if any(ts.size == 0 for ts in series):
        raise DataError("cannot window an empty series")
    first = max(int(hours_since_epoch(ts[:1])[0]) for ts in series)
    last = min(int(hours_since_epoch(ts[-1:])[0]) for ts in series)
    length = last - first + 1
    if length < steps:
        raise DataError(f"series share {max(length, 0)} common hours, fewer than window length {steps}")
    masks, rows = zip(*(_presence(ts, first, length) for ts in series))
    valid = np.logical_and.reduce(masks)
    bad = np.concatenate([[0], np.cumsum(~valid)])
    cand = np.arange(0, length - steps + 1, stride)
    ok = (bad[cand + steps] - bad[cand]) == 0
    report = WindowReport(common_hours=int(valid.sum()), candidates=int(cand.size), kept=int(ok.sum()))
    return first, cand[ok], rows[0], rows[1], rows[2], report


def window_samples(grid: GridSeries, gauge: HourlySeries, harmonic: HourlySeries, steps: int = 36,
                   stride: int = 24) -> SampleSet:
    """Cut aligned windows of ``steps`` hours every ``stride`` hours.

    Windows touching an hour missing from any series are dropped; the counts
    are kept in ``SampleSet.report``.
    """
    first, starts, rg, rl, rt, report = window_starts(grid, gauge, harmonic, steps, stride)
    if starts.size == 0:
        raise DataError("no complete window in the common span")
    hours = starts[:, None] + np.arange(steps)
    atmos = grid.grid[rg[hours]]
    level = gauge.values[rl[hours]][..., None]
    tide = harmonic.values[rt[hours]][..., None]
    surge = level - tide
    start_ts = (np.datetime64(0, "h") + first + starts).astype("datetime64[h]")
    return SampleSet(atmos, tide, surge, start_ts, steps, report=report)


@dataclass(frozen=True)
class SplitSpec:
    """Train on windows ending before ``train_end``; halve the rest into val/test."""

    train_end: np.datetime64 = np.datetime64("2021-01-01T00", "h")

    def __post_init__(self):
        object.__setattr__(self, "train_end", parse_time(self.train_end))


def chronological_split(samples: SampleSet, spec: SplitSpec = SplitSpec()):
    """Return ``(train, val, test)``.

    Windows straddling ``train_end`` or the val/test boundary are dropped so no
    hour appears in two partitions.
    """
    starts, ends = samples.starts, samples.ends
    if np.any(np.diff(hours_since_epoch(starts)) <= 0):
        raise DataError("samples are not in chronological order")
    train_idx = np.flatnonzero(ends < spec.train_end)
    rest = np.flatnonzero(starts >= spec.train_end)
    if train_idx.size == 0:
        raise ConfigError(f"no training windows end before {format_time(spec.train_end)}")
    if rest.size < 2:
        raise ConfigError(f"need at least 2 windows after {format_time(spec.train_end)} for val/test, got {rest.size}")
    boundary = starts[rest[rest.size - rest.size // 2]]
    val_idx = rest[ends[rest] < boundary]
    test_idx = rest[starts[rest] >= boundary]
    if val_idx.size == 0 or test_idx.size == 0:
        raise ConfigError("validation or test partition is empty")
    return samples.subset(train_idx), samples.subset(val_idx), samples.subset(test_idx)
