"""Data ingestion, synthetic generation and sample preparation."""

from .pipeline import (
    SampleSet, SplitSpec, Standardizer, WindowReport, chronological_split, compute_surge,
    standardize_fit_apply, window_samples, window_starts,
)
from .series import (
    GaugeSeries, GridSeries, HarmonicSeries, HourlySeries, format_time, load_grid_series, parse_time,
    read_series_csv, write_grid_series, write_series_csv,
)
from .synthetic import SyntheticConfig, generate_synthetic, synthetic_storm_generate

__all__ = [
    "GaugeSeries", "GridSeries", "HarmonicSeries", "HourlySeries", "SampleSet", "SplitSpec",
    "Standardizer", "SyntheticConfig", "WindowReport", "chronological_split", "compute_surge",
    "format_time", "generate_synthetic", "load_grid_series", "parse_time", "read_series_csv",
    "standardize_fit_apply", "synthetic_storm_generate", "window_samples", "window_starts",
    "write_grid_series", "write_series_csv",
]
