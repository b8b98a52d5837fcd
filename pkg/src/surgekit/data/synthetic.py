"""Seeded desk-scale stand-in for reanalysis winds and tide-gauge records.

Model, per hour ``t``:

* harmonic tide: ``0.3 cos(2 pi t / 12.42 + a) + 0.15 cos(2 pi t / 23.93 + b)`` m;
* wind: a smooth background flow (diurnal + synoptic oscillation with a weak
  spatial tilt) plus translating Gaussian-profile cyclonic vortices arriving
  as a Poisson process;
* pressure: reference pressure, a slow synoptic wave and a Gaussian deficit
  under each vortex;
* surge at the station: onshore wind stress ``|w| (w . d_onshore)`` passed
  through a causal exponential kernel, plus the inverse-barometer term
  ``(p_ref - p) / (rho g)``;
* level = tide + surge + N(0, noise_m^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter

from ..errors import ConfigError
from .series import (
    DEFAULT_BBOX, DEFAULT_ORIGIN, GRID_HW, HOUR, RESOLUTION_DEG, GaugeSeries, GridSeries,
    HarmonicSeries, parse_time,
)

STATION_ID = "8726520"
STATION_LATLON = (27.7606, -82.6269)
P_REF = 101325.0
RHO_G = 1025.0 * 9.81
TIDE_PERIODS_H = (12.42, 23.93)
TIDE_AMPLITUDES_M = (0.3, 0.15)


@dataclass
class SyntheticConfig:
    diurnal_wind: float = 1.5            # m/s
    synoptic_wind: float = 4.0           # m/s
    synoptic_period_h: float = 24 * 4.3
    synoptic_pressure: float = 400.0     # Pa
    storms_per_day: float = 1 / 30
    vmax_range: tuple = (18.0, 40.0)     # m/s
    radius_range_deg: tuple = (0.5, 1.0)
    duration_range_h: tuple = (36.0, 72.0)
    pressure_per_wind2: float = 2.0      # Pa per (m/s)^2 of vmax
    onshore_deg: float = 30.0            # direction the onshore unit vector points, CCW from east
    stress_to_surge: float = 1.6e-3      # m per (m/s)^2
    surge_timescale_h: float = 6.0
    noise_m: float = 0.01


ZERO_FORCING = SyntheticConfig(diurnal_wind=0.0, synoptic_wind=0.0, synoptic_pressure=0.0, storms_per_day=0.0)


@dataclass
class Vortex:
    start_h: float
    duration_h: float
    lat0: float
    lon0: float
    lat1: float
    lon1: float
    vmax: float
    radius_deg: float


@dataclass
class SyntheticDataset:
    grid: GridSeries
    gauge: GaugeSeries
    harmonic: HarmonicSeries
    surge: np.ndarray
    vortices: list = field(default_factory=list)


def _draw_vortices(rng: np.random.Generator, hours: int, cfg: SyntheticConfig, center) -> list[Vortex]:
    n = rng.poisson(cfg.storms_per_day * hours / 24.0) if cfg.storms_per_day > 0 else 0
    out = []
    for _ in range(n):
        heading = rng.uniform(0, 2 * np.pi)
        miss = rng.uniform(-1.0, 1.0)
        # straight track through a point near the station, 3 deg either side
        cx = center[1] + miss * np.cos(heading + np.pi / 2)
        cy = center[0] + miss * np.sin(heading + np.pi / 2)
        dx, dy = 3.0 * np.cos(heading), 3.0 * np.sin(heading)
        out.append(Vortex(
            start_h=rng.uniform(-48, hours), duration_h=rng.uniform(*cfg.duration_range_h),
            lat0=cy - dy, lon0=cx - dx, lat1=cy + dy, lon1=cx + dx,
            vmax=rng.uniform(*cfg.vmax_range), radius_deg=rng.uniform(*cfg.radius_range_deg)))
    out.sort(key=lambda v: v.start_h)
    return out


def _add_vortex(grid: np.ndarray, t0: int, v: Vortex, lat: np.ndarray, lon: np.ndarray, cfg) -> None:
    first = max(int(np.ceil(v.start_h)), t0)
    last = min(int(np.floor(v.start_h + v.duration_h)), t0 + grid.shape[0] - 1)
    if last < first:
        return
    t = np.arange(first, last + 1, dtype=np.float64)
    frac = (t - v.start_h) / v.duration_h
    clat = v.lat0 + frac * (v.lat1 - v.lat0)
    clon = v.lon0 + frac * (v.lon1 - v.lon0)
    coslat = np.cos(np.deg2rad(27.5))
    dy = lat[None, :, None] - clat[:, None, None]
    dx = (lon[None, None, :] - clon[:, None, None]) * coslat
    r = np.sqrt(dx * dx + dy * dy) + 1e-9
    ratio = r / v.radius_deg
    # ramp intensity in and out over the track
    ramp = np.sin(np.pi * frac)[:, None, None]
    speed = v.vmax * ratio * np.exp(0.5 * (1.0 - ratio * ratio)) * ramp
    sl = slice(first - t0, last - t0 + 1)
    grid[sl, :, :, 0] += (-speed * dy / r).astype(np.float32)   # counter-clockwise
    grid[sl, :, :, 1] += (speed * dx / r).astype(np.float32)
    deficit = cfg.pressure_per_wind2 * v.vmax ** 2 * np.exp(-0.5 * ratio * ratio) * ramp
    grid[sl, :, :, 2] -= deficit.astype(np.float32)


def generate_synthetic(seed: int, n_windows: int, steps: int = 36, stride: int = 24,
                       start="2020-01-01T00", cfg: SyntheticConfig | None = None,
                       chunk_hours: int = 8760) -> SyntheticDataset:
    """Generate ``(n_windows - 1) * stride + steps`` hours of gap-free data."""
    if n_windows < 1 or steps < 1 or stride < 1:
        raise ConfigError(f"need n_windows, steps, stride >= 1; got {n_windows}, {steps}, {stride}")
    cfg = cfg or SyntheticConfig()
    hours = (n_windows - 1) * stride + steps
    rng = np.random.default_rng(seed)
    t0 = parse_time(start)
    timestamps = t0 + np.arange(hours) * HOUR

    tide_phase = rng.uniform(0, 2 * np.pi, size=2)
    wind_phase = rng.uniform(0, 2 * np.pi, size=5)
    h, w = GRID_HW
    lat = DEFAULT_ORIGIN["lat"] + RESOLUTION_DEG * np.arange(h)
    lon = DEFAULT_ORIGIN["lon"] + RESOLUTION_DEG * np.arange(w)
    tilt_y = (lat - lat.mean()) / (lat.max() - lat.min())
    tilt_x = (lon - lon.mean()) / (lon.max() - lon.min())
    spatial = 1.0 + 0.2 * tilt_y[:, None] + 0.1 * tilt_x[None, :]
    vortices = _draw_vortices(rng, hours, cfg, STATION_LATLON)

    grid = np.empty((hours, h, w, 3), dtype=np.float32)
    for c0 in range(0, hours, chunk_hours):
        t = np.arange(c0, min(hours, c0 + chunk_hours), dtype=np.float64)
        syn = 2 * np.pi * t / cfg.synoptic_period_h
        day = 2 * np.pi * t / 24.0
        u = cfg.synoptic_wind * np.sin(syn + wind_phase[0]) + cfg.diurnal_wind * np.sin(day + wind_phase[1])
        v = cfg.synoptic_wind * np.cos(0.7 * syn + wind_phase[2]) + cfg.diurnal_wind * np.cos(day + wind_phase[3])
        p = cfg.synoptic_pressure * np.sin(0.5 * syn + wind_phase[4])
        block = grid[c0:c0 + t.size]
        block[..., 0] = u[:, None, None] * spatial
        block[..., 1] = v[:, None, None] * spatial
        block[..., 2] = P_REF + p[:, None, None] * spatial
        for vx in vortices:
            _add_vortex(block, c0, vx, lat, lon, cfg)

    th = np.arange(hours, dtype=np.float64)
    tide = sum(a * np.cos(2 * np.pi * th / period + ph)
               for a, period, ph in zip(TIDE_AMPLITUDES_M, TIDE_PERIODS_H, tide_phase))

    # station forcing: mean of the 2x2 cells surrounding the station
    i = int(np.searchsorted(lat, STATION_LATLON[0])) - 1
    j = int(np.searchsorted(lon, STATION_LATLON[1])) - 1
    local = grid[:, i:i + 2, j:j + 2, :].astype(np.float64).mean(axis=(1, 2))
    wu, wv, pres = local[:, 0], local[:, 1], local[:, 2]
    ang = np.deg2rad(cfg.onshore_deg)
    stress = np.hypot(wu, wv) * (wu * np.cos(ang) + wv * np.sin(ang))
    decay = np.exp(-1.0 / cfg.surge_timescale_h)
    wind_setup = lfilter([1.0 - decay], [1.0, -decay], cfg.stress_to_surge * stress)
    surge = wind_setup + (P_REF - pres) / RHO_G
    noise = rng.normal(0.0, cfg.noise_m, size=hours) if cfg.noise_m > 0 else np.zeros(hours)
    level = tide + surge + noise

    return SyntheticDataset(
        grid=GridSeries(timestamps, grid, bbox=dict(DEFAULT_BBOX), resolution=RESOLUTION_DEG,
                        origin=dict(DEFAULT_ORIGIN)),
        gauge=GaugeSeries(timestamps, level, station_id=STATION_ID),
        harmonic=HarmonicSeries(timestamps, tide, station_id=STATION_ID),
        surge=surge,
        vortices=vortices,
    )


def synthetic_storm_generate(seed: int, n_windows: int, steps: int = 36, stride: int = 24,
                             start="2020-01-01T00", cfg: SyntheticConfig | None = None):
    """Return ``(GridSeries, GaugeSeries, HarmonicSeries)``; see :func:`generate_synthetic`."""
    ds = generate_synthetic(seed, n_windows, steps, stride, start, cfg)
    return ds.grid, ds.gauge, ds.harmonic
