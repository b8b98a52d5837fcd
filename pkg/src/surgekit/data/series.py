"""Hourly series types and their on-disk formats.

Gauge and harmonic series are CSV files with the header
``timestamp_iso8601,value_m``. Atmospheric grids use a binary container: one
line of JSON (the header) terminated by ``\\n``, then a little-endian float32
block of ``T_total * H * W * C`` values in ``(t, row, col, channel)`` order.

Grid orientation: index ``(0, 0)`` is the south-west corner given by
``header["origin"]``; rows increase northward and columns eastward.

Timestamps are UTC and held as ``datetime64[h]``. Gaps shorter than or equal
to ``max_gap_hours`` (distance between the surrounding samples) are filled by
linear interpolation on load; longer gaps are left in place and reported.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np

from ..errors import DataError, IngestionError

HOUR = np.timedelta64(1, "h")
CSV_HEADER = "timestamp_iso8601,value_m"
GRID_MAGIC = "surgekit-grid"
GRID_VERSION = 1
CHANNELS = ("u_wind_m_s", "v_wind_m_s", "surface_pressure_pa")
GRID_HW = (15, 15)
DEFAULT_BBOX = {"lon": [-85.0, -82.0], "lat": [26.0, 29.0]}
DEFAULT_ORIGIN = {"lat": 26.0, "lon": -85.0}
RESOLUTION_DEG = 0.25
MAX_GAP_HOURS = 3


def parse_time(value) -> np.datetime64:
    """Parse an ISO-8601 instant (UTC) to ``datetime64[h]``; must fall on the hour."""
    if isinstance(value, np.datetime64):
        t = value
    else:
        text = str(value).strip()
        if text.endswith("Z"):
            text = text[:-1] + "+00:00"
        try:
            dt = datetime.fromisoformat(text)
        except ValueError as exc:
            raise DataError(f"unparseable timestamp {value!r}") from exc
        if dt.tzinfo is not None:
            dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
        t = np.datetime64(dt, "s")
    hours = t.astype("datetime64[h]")
    if hours != t:
        raise DataError(f"timestamp {value!r} is not on the hour")
    return hours


def format_time(t) -> str:
    return str(np.datetime64(t, "s")) + "Z"


def hours_since_epoch(ts: np.ndarray) -> np.ndarray:
    return ts.astype("datetime64[h]").astype(np.int64)


def _check_increasing(ts: np.ndarray, what: str) -> None:
    if ts.size > 1:
        bad = np.flatnonzero(np.diff(hours_since_epoch(ts)) <= 0)
        if bad.size:
            i = int(bad[0]) + 1
            raise DataError(f"{what}: timestamps not strictly increasing at index {i} ({format_time(ts[i])})")


def fill_short_gaps(timestamps: np.ndarray, values: np.ndarray, max_gap_hours: int = MAX_GAP_HOURS):
    """Linearly interpolate missing hours between samples at most ``max_gap_hours`` apart."""
    hrs = hours_since_epoch(timestamps)
    if hrs.size < 2:
        return timestamps, values
    diffs = np.diff(hrs)
    fill = np.flatnonzero((diffs > 1) & (diffs <= max_gap_hours))
    if fill.size == 0:
        return timestamps, values
    new_t, new_v = [], []
    prev = 0
    for i in fill:
        new_t.append(timestamps[prev:i + 1])
        new_v.append(values[prev:i + 1])
        gap = int(diffs[i])
        frac = (np.arange(1, gap) / gap).reshape((-1,) + (1,) * (values.ndim - 1))
        a = values[i].astype(np.float64)
        b = values[i + 1].astype(np.float64)
        new_t.append(timestamps[i] + np.arange(1, gap) * HOUR)
        new_v.append((a + (b - a) * frac).astype(values.dtype))
        prev = i + 1
    new_t.append(timestamps[prev:])
    new_v.append(values[prev:])
    return np.concatenate(new_t), np.concatenate(new_v)


def find_gaps(timestamps: np.ndarray) -> list[tuple[np.datetime64, np.datetime64]]:
    """``(last_present, next_present)`` pairs around every missing stretch."""
    hrs = hours_since_epoch(timestamps)
    idx = np.flatnonzero(np.diff(hrs) > 1)
    return [(timestamps[i], timestamps[i + 1]) for i in idx]


@dataclass
class HourlySeries:
    """Hourly scalar series in meters relative to MSL; absent hours are gaps."""

    timestamps: np.ndarray
    values: np.ndarray
    station_id: str = "unknown"

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.timestamps.shape != self.values.shape or self.values.ndim != 1:
            raise DataError(f"timestamps {self.timestamps.shape} and values {self.values.shape} disagree")
        _check_increasing(self.timestamps, type(self).__name__)
        if not np.all(np.isfinite(self.values)):
            raise DataError(f"{type(self).__name__} contains non-finite values")

    def __len__(self) -> int:
        return self.values.size

    def gaps(self):
        return find_gaps(self.timestamps)


class GaugeSeries(HourlySeries):
    """Observed total water level."""


class HarmonicSeries(HourlySeries):
    """Harmonic tide prediction."""


@dataclass
class GridSeries:
    """Hourly stack of ``(H, W, 3)`` atmospheric fields: u wind, v wind (m/s), pressure (Pa)."""

    timestamps: np.ndarray
    grid: np.ndarray
    bbox: dict = field(default_factory=lambda: dict(DEFAULT_BBOX))
    resolution: float = RESOLUTION_DEG
    origin: dict = field(default_factory=lambda: dict(DEFAULT_ORIGIN))
    channels: tuple = CHANNELS

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        self.grid = np.asarray(self.grid, dtype=np.float32)
        if self.grid.ndim != 4 or self.grid.shape[0] != self.timestamps.size:
            raise DataError(f"grid shape {self.grid.shape} does not match {self.timestamps.size} timestamps")
        if tuple(self.channels) != CHANNELS or self.grid.shape[-1] != len(CHANNELS):
            raise DataError(f"channel order must be {CHANNELS}, got {tuple(self.channels)}")
        _check_increasing(self.timestamps, "GridSeries")

    def __len__(self) -> int:
        return self.timestamps.size

    @property
    def shape(self) -> tuple:
        return self.grid.shape[1:]

    def gaps(self):
        return find_gaps(self.timestamps)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Latitudes of rows and longitudes of columns."""
        h, w = self.grid.shape[1:3]
        lat = self.origin["lat"] + self.resolution * np.arange(h)
        lon = self.origin["lon"] + self.resolution * np.arange(w)
        return lat, lon


def _atomic_write(path, chunks) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            for chunk in chunks:
                fh.write(chunk)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_grid_series(path, series: GridSeries) -> None:
    ts = series.timestamps
    contiguous = ts.size < 2 or bool(np.all(np.diff(hours_since_epoch(ts)) == 1))
    header = {
        "magic": GRID_MAGIC,
        "version": GRID_VERSION,
        "bbox": series.bbox,
        "resolution_deg": series.resolution,
        "origin": series.origin,
        "orientation": "row 0 = southern edge, rows northward; col 0 = western edge, cols eastward",
        "channels": list(series.channels),
        "shape": list(series.grid.shape[1:]),
        "start": format_time(ts[0]),
        "T_total": int(ts.size),
        "dtype": "<f4",
        "order": "t,row,col,channel",
    }
    if not contiguous:
        header["timestamps"] = [format_time(t) for t in ts]
    head = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n"
    body = np.ascontiguousarray(series.grid, dtype="<f4")
    _atomic_write(path, [head, memoryview(body).cast("B")])


def load_grid_series(path, max_gap_hours: int = MAX_GAP_HOURS, expected_hw=GRID_HW) -> GridSeries:
    """Read and validate a grid container, filling short gaps."""
    with open(path, "rb") as fh:
        raw = fh.read()
    end = raw.find(b"\n")
    if end < 0:
        raise IngestionError(f"{path}: missing header terminator", offset=0)
    try:
        header = json.loads(raw[:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IngestionError(f"{path}: malformed header: {exc}", offset=0) from exc
    if not isinstance(header, dict) or header.get("magic") != GRID_MAGIC:
        raise IngestionError(f"{path}: not a surgekit grid container", offset=0)
    if header.get("version") != GRID_VERSION:
        raise IngestionError(f"{path}: unsupported container version {header.get('version')}", offset=0)
    try:
        h, w, c = (int(n) for n in header["shape"])
        total = int(header["T_total"])
        channels = tuple(header["channels"])
        start = parse_time(header["start"])
    except (KeyError, TypeError, ValueError, DataError) as exc:
        raise IngestionError(f"{path}: incomplete header: {exc}", offset=0) from exc
    if expected_hw is not None and (h, w) != tuple(expected_hw):
        raise IngestionError(
            f"{path}: grid is {h}x{w}, expected {expected_hw[0]}x{expected_hw[1]}", offset=0)
    if channels != CHANNELS or c != len(CHANNELS):
        raise IngestionError(f"{path}: channels {channels} differ from required {CHANNELS}", offset=0)
    if total < 1:
        raise IngestionError(f"{path}: T_total must be positive", offset=0)
    offset = end + 1
    expected = total * h * w * c * 4
    if len(raw) - offset != expected:
        raise IngestionError(
            f"{path}: data block holds {len(raw) - offset} bytes, header implies {expected}", offset=offset)
    grid = np.frombuffer(raw, dtype="<f4", offset=offset).reshape(total, h, w, c).astype(np.float32)
    if "timestamps" in header:
        try:
            ts = np.array([parse_time(t) for t in header["timestamps"]], dtype="datetime64[h]")
        except DataError as exc:
            raise IngestionError(f"{path}: {exc}", offset=0) from exc
        if ts.size != total:
            raise IngestionError(f"{path}: {ts.size} timestamps for T_total={total}", offset=0)
        diffs = np.diff(hours_since_epoch(ts))
        if np.any(diffs <= 0):
            i = int(np.flatnonzero(diffs <= 0)[0]) + 1
            raise IngestionError(f"{path}: timestamps not strictly increasing at frame {i}", offset=0)
    else:
        ts = start + np.arange(total) * HOUR
    if not np.all(np.isfinite(grid)):
        frame = int(np.flatnonzero(~np.isfinite(grid).reshape(total, -1).all(axis=1))[0])
        raise IngestionError(f"{path}: non-finite values in frame {frame}",
                             offset=offset + frame * h * w * c * 4)
    ts, grid = fill_short_gaps(ts, grid, max_gap_hours)
    return GridSeries(ts, grid, bbox=header.get("bbox", dict(DEFAULT_BBOX)),
                      resolution=float(header.get("resolution_deg", RESOLUTION_DEG)),
                      origin=header.get("origin", dict(DEFAULT_ORIGIN)), channels=channels)


def write_series_csv(path, series: HourlySeries) -> None:
    lines = [CSV_HEADER]
    lines += [f"{format_time(t)},{v!r}" for t, v in zip(series.timestamps, series.values.tolist())]
    _atomic_write(path, [("\n".join(lines) + "\n").encode("utf-8")])


def read_series_csv(path, cls=GaugeSeries, station_id: str = "unknown",
                    max_gap_hours: int = MAX_GAP_HOURS) -> HourlySeries:
    """Parse a ``timestamp_iso8601,value_m`` CSV into ``cls``, filling short gaps."""
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n")
    if not lines or lines[0].strip().decode("utf-8", "replace") != CSV_HEADER:
        raise IngestionError(f"{path}: first line must be {CSV_HEADER!r}", offset=0)
    offset = len(lines[0]) + 1
    stamps, values = [], []
    for line in lines[1:]:
        text = line.strip().decode("utf-8", "replace")
        if text:
            parts = text.split(",")
            try:
                if len(parts) != 2:
                    raise DataError("expected 2 columns")
                stamps.append(parse_time(parts[0]))
                values.append(float(parts[1]))
            except (DataError, ValueError) as exc:
                raise IngestionError(f"{path}: bad record {text!r}: {exc}", offset=offset) from exc
            if not np.isfinite(values[-1]):
                raise IngestionError(f"{path}: non-finite value in {text!r}", offset=offset)
            if len(stamps) > 1 and stamps[-1] <= stamps[-2]:
                raise IngestionError(f"{path}: timestamps not strictly increasing at {text!r}", offset=offset)
        offset += len(line) + 1
    if not stamps:
        raise IngestionError(f"{path}: no records", offset=offset)
    ts, vals = fill_short_gaps(np.array(stamps, dtype="datetime64[h]"), np.array(values), max_gap_hours)
    return cls(ts, vals, station_id=station_id)
