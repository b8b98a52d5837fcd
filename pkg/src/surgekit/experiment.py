"""Dataset directories, run directories and the end-to-end experiment flow.

A dataset directory holds ``grid.sgrid``, ``gauge.csv``, ``harmonic.csv`` and
``dataset.json``. A run directory holds everything one ``train`` produced for
one architecture; it can be re-evaluated and re-plotted offline.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import plots
from .data import (
    SplitSpec, Standardizer, chronological_split, format_time, generate_synthetic,
    load_grid_series, parse_time, read_series_csv, standardize_fit_apply, window_samples,
    write_grid_series, write_series_csv,
)
from .data.pipeline import window_starts
from .data.series import GaugeSeries, HarmonicSeries
from .errors import ConfigError, DataError, DimensionError, TrainingDiverged
from .models import ArchitectureKind, load_model
from .training import (
    MetricsReport, TrainConfig, correlation_coefficient, evaluate, format_table, holdout_repeat,
    kind_label, predict, r_squared,
)

SCHEMA_VERSION = 1
GRID_FILE, GAUGE_FILE, HARMONIC_FILE, META_FILE = "grid.sgrid", "gauge.csv", "harmonic.csv", "dataset.json"


@dataclass
class ExperimentConfig:
    """Flat, declarative experiment settings; serialized as JSON with ``schema_version``."""

    schema_version: int = SCHEMA_VERSION
    source: str = "synthetic"
    seed: int = 0
    n_windows: int = 520
    years: float = 0.0
    steps: int = 36
    stride: int = 24
    start: str = "2020-01-01T00:00:00Z"
    grid: str = ""
    gauge: str = ""
    harmonic: str = ""
    station: str = "8726520"
    begin: str = ""
    end: str = ""
    data: str = ""
    arch: str = "cnn-lstm"
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 15
    repeats: int = 5
    train_end: str = "2021-01-01T00:00:00Z"
    dtype: str = "float32"
    dropout: float = 0.2
    lstm_units: int = 128
    out: str = ""

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"config schema_version {version} is not supported (expected {SCHEMA_VERSION})")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in d.items():
            if isinstance(value, (dict, list)):
                raise ConfigError(f"config key {key!r} must be a scalar (flat key-value format)")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def validate(self) -> None:
        if self.source not in ("synthetic", "files", "noaa"):
            raise ConfigError(f"source must be synthetic, files or noaa, got {self.source!r}")
        if self.steps < 1 or self.stride < 1 or self.n_windows < 1:
            raise ConfigError("steps, stride and n_windows must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        ArchitectureKind.parse(self.arch)
        self.train_config()

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.batch_size, self.epochs, self.repeats, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)


def _log(log, msg):
    if log is not None:
        log(msg)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input path does not exist: {path}")
    return path


# -- datasets ---------------------------------------------------------------

def synthetic_hours(cfg: ExperimentConfig) -> int:
    if cfg.years > 0:
        return int(round(cfg.years * 365.25 * 24))
    return (cfg.n_windows - 1) * cfg.stride + cfg.steps


def ingest(cfg: ExperimentConfig, out_dir, client=None, log=None) -> dict:
    """Write a validated dataset directory and return its coverage summary."""
    out = Path(out_dir)
    if cfg.source == "synthetic":
        hours = synthetic_hours(cfg)
        # generate_synthetic sizes by windows; one-hour stride gives exactly `hours`
        ds = generate_synthetic(cfg.seed, hours - cfg.steps + 1, cfg.steps, 1, cfg.start)
        grid, gauge, harmonic = ds.grid, ds.gauge, ds.harmonic
    elif cfg.source == "files":
        for key in ("grid", "gauge", "harmonic"):
            if not getattr(cfg, key):
                raise ConfigError(f"source 'files' needs --{key}")
        grid = load_grid_series(_require(cfg.grid))
        gauge = read_series_csv(_require(cfg.gauge), GaugeSeries, cfg.station)
        harmonic = read_series_csv(_require(cfg.harmonic), HarmonicSeries, cfg.station)
    else:
        from .noaa import NoaaClient, StationQuery

        if not cfg.grid or not cfg.begin or not cfg.end:
            raise ConfigError("source 'noaa' needs --grid, --begin and --end")
        grid = load_grid_series(_require(cfg.grid))
        client = client or NoaaClient()
        gauge = client.fetch_series(StationQuery(cfg.begin, cfg.end, "hourly_height", cfg.station))
        harmonic = client.fetch_series(StationQuery(cfg.begin, cfg.end, "predictions", cfg.station))

    out.mkdir(parents=True, exist_ok=True)
    write_grid_series(out / GRID_FILE, grid)
    write_series_csv(out / GAUGE_FILE, gauge)
    write_series_csv(out / HARMONIC_FILE, harmonic)
    summary = coverage_summary(grid, gauge, harmonic, cfg.steps, cfg.stride)
    meta = {"schema_version": SCHEMA_VERSION, "source": cfg.source, "station": gauge.station_id,
            "seed": cfg.seed if cfg.source == "synthetic" else None, "steps": cfg.steps, "stride": cfg.stride,
            "coverage": summary}
    (out / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _log(log, format_coverage(summary))
    return summary


def coverage_summary(grid, gauge, harmonic, steps: int, stride: int) -> dict:
    def span(series):
        return {"first": format_time(series.timestamps[0]), "last": format_time(series.timestamps[-1]),
                "hours": int(len(series)), "gaps": len(series.gaps())}

    try:
        *_, report = window_starts(grid, gauge, harmonic, steps, stride)
        windows = {"candidates": report.candidates, "kept": report.kept, "dropped": report.dropped}
    except DataError:
        windows = {"candidates": 0, "kept": 0, "dropped": 0}
    return {"grid": span(grid), "gauge": span(gauge), "harmonic": span(harmonic),
            "steps": steps, "stride": stride, "windows": windows}


def format_coverage(summary: dict) -> str:
    lines = []
    for name in ("grid", "gauge", "harmonic"):
        s = summary[name]
        lines.append(f"{name:9s} {s['first']} .. {s['last']}  {s['hours']} h, {s['gaps']} gaps")
    w = summary["windows"]
    lines.append(f"windows   T={summary['steps']} stride={summary['stride']}: {w['kept']} kept "
                 f"of {w['candidates']} ({w['dropped']} dropped at gaps)")
    return "\n".join(lines)


@dataclass
class Dataset:
    grid: object
    gauge: object
    harmonic: object
    meta: dict
    fingerprint: str


def load_dataset(data_dir) -> Dataset:
    d = _require(data_dir)
    paths = [_require(d / name) for name in (GRID_FILE, GAUGE_FILE, HARMONIC_FILE, META_FILE)]
    meta = json.loads(paths[3].read_text())
    station = meta.get("station", "unknown")
    h = hashlib.sha256()
    for p in paths[:3]:
        h.update(file_sha256(p).encode())
    return Dataset(load_grid_series(paths[0]), read_series_csv(paths[1], GaugeSeries, station),
                   read_series_csv(paths[2], HarmonicSeries, station), meta, h.hexdigest())


def partitions(ds: Dataset, steps: int, stride: int, split: SplitSpec, standardizer: Standardizer | None = None):
    """``(train, val, test, standardizer)``; fits the standardizer on train unless one is given."""
    samples = window_samples(ds.grid, ds.gauge, ds.harmonic, steps, stride)
    train, val, test = chronological_split(samples, split)
    if standardizer is None:
        (train, val, test), standardizer = standardize_fit_apply(train, val, test)
    else:
        train, val, test = (s.with_standardizer(standardizer) for s in (train, val, test))
    return train, val, test, standardizer


# -- training runs ------------------------------------------------------------

def _model_kwargs(cfg: ExperimentConfig) -> dict:
    kw = {"dtype": cfg.dtype, "dropout": cfg.dropout}
    if ArchitectureKind.parse(cfg.arch) is not ArchitectureKind.CNN_3D:
        kw["lstm_units"] = cfg.lstm_units
    return kw


def extreme_window(samples) -> int:
    """Index of the window with the largest absolute surge."""
    return int(np.argmax(np.abs(samples.surge).max(axis=(1, 2))))


def train_run(cfg: ExperimentConfig, run_dir, log=None) -> MetricsReport:
    """Train ``cfg.repeats`` models of ``cfg.arch`` and write a complete run directory."""
    if not cfg.data:
        raise ConfigError("train needs a dataset directory (--data)")
    ds = load_dataset(cfg.data)
    split = SplitSpec(cfg.train_end)
    train, val, test, std = partitions(ds, cfg.steps, cfg.stride, split)
    _log(log, f"{cfg.arch}: {len(train)} train / {len(val)} val / {len(test)} test windows")
    run = Path(run_dir)
    (run / "checkpoints").mkdir(parents=True, exist_ok=True)
    provenance = {"dataset_fingerprint": ds.fingerprint, "standardizer": std.to_dict(),
                  "train_end": format_time(split.train_end), "stride": cfg.stride,
                  "partition_sizes": {"train": len(train), "val": len(val), "test": len(test)}}
    models = {}

    def keep(i, model, result):
        model.save(run / "checkpoints" / f"run_{i}.ckpt",
                   {**provenance, "run": i, "seed": result.seed, "train_loss": result.train_loss})
        models[i] = model

    report = holdout_repeat(cfg.arch, train, val, test, cfg.train_config(), _model_kwargs(cfg),
                            on_run_end=keep, log=log)
    report.config.update(provenance)
    if not report.valid_runs:
        _write_reports(run, cfg, report)
        raise TrainingDiverged(f"all {len(report.runs)} runs of {cfg.arch} diverged")
    selected = min(report.valid_runs, key=lambda r: (r.val_loss, r.run)).run
    report.config["selected_run"] = selected
    _write_reports(run, cfg, report)
    _write_predictions(run / "predictions.csv", models[selected], test, std)
    _run_plots(run, report, models[selected], test, std)
    return report


def _write_reports(run: Path, cfg: ExperimentConfig, report: MetricsReport) -> None:
    resolved = cfg.to_dict()
    (run / "config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    (run / "metrics.json").write_text(json.dumps(report.metrics_dict(), indent=2, sort_keys=True) + "\n")
    (run / "timing.json").write_text(json.dumps(report.timing_dict(), indent=2, sort_keys=True) + "\n")
    (run / "table.txt").write_text(format_table([report]))
    with open(run / "loss_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "epoch", "train_loss", "val_loss"])
        for r in report.runs:
            for c in r.curves:
                w.writerow([r.run, c["epoch"], repr(c["train_loss"]), repr(c["val_loss"])])


def _meters(model, samples, std: Standardizer):
    pred = std.invert_level(predict(model, samples)[..., 0])
    return pred, samples.target[..., 0]


def _write_predictions(path, model, test, std) -> None:
    pred, truth = _meters(model, test, std)
    stamps = test.hourly_index()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "timestamp", "measured_m", "tide_m", "predicted_m"])
        for i in range(len(test)):
            for k in range(test.steps):
                w.writerow([i, format_time(stamps[i, k]), repr(float(truth[i, k])),
                            repr(float(test.tide[i, k, 0])), repr(float(pred[i, k]))])


def read_predictions(path) -> dict:
    """Columns of a predictions CSV; needs at least ``timestamp, measured_m, predicted_m``."""
    path = _require(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise DataError(f"{path}: no prediction rows")
    missing = {"timestamp", "measured_m", "predicted_m"} - set(rows[0])
    if missing:
        raise DataError(f"{path}: missing columns {sorted(missing)}")
    try:
        out = {"timestamp": np.array([parse_time(r["timestamp"]) for r in rows], dtype="datetime64[h]"),
               "measured_m": np.array([float(r["measured_m"]) for r in rows]),
               "predicted_m": np.array([float(r["predicted_m"]) for r in rows]),
               "window": np.array([int(r.get("window", 0)) for r in rows])}
    except ValueError as exc:
        raise DataError(f"{path}: unreadable value: {exc}") from exc
    return out


def _run_plots(run: Path, report: MetricsReport, model, test, std) -> None:
    label = kind_label(report.architecture)
    r0 = report.valid_runs[0]
    plots.loss_curves_svg(run / "loss_curves.svg",
                          {label: ([c["train_loss"] for c in r0.curves], [c["val_loss"] for c in r0.curves])})
    pred, truth = _meters(model, test, std)
    times = test.hourly_index().ravel()
    cc = correlation_coefficient(pred, truth)
    plots.time_series_svg(run / "test_timeseries.svg", times, truth.ravel(), {label: pred.ravel()},
                          "Test partition")
    plots.scatter_svg(run / "test_scatter.svg", truth, {label: pred}, {label: cc}, "Test partition")
    k = extreme_window(test)
    cc_k = correlation_coefficient(pred[k], truth[k])
    title = f"Extreme window from {format_time(test.starts[k])}"
    plots.time_series_svg(run / "extreme_timeseries.svg", test.hourly_index()[k], truth[k], {label: pred[k]}, title)
    plots.scatter_svg(run / "extreme_scatter.svg", truth[k], {label: pred[k]}, {label: cc_k}, title)


# -- evaluation ---------------------------------------------------------------

def _metrics_m(pred, truth) -> dict:
    err = np.asarray(pred, dtype=np.float64) - truth
    return {"mse_m2": float(np.mean(err * err)), "rmse_m": float(np.sqrt(np.mean(err * err))),
            "r2": r_squared(pred, truth), "cc": correlation_coefficient(pred, truth), "n_points": int(err.size)}


def _select_window(samples, start, end):
    start, end = parse_time(start), parse_time(end)
    if start >= end:
        raise ConfigError(f"window start {format_time(start)} must precede end {format_time(end)}")
    idx = np.flatnonzero((samples.starts >= start) & (samples.ends <= end))
    if idx.size == 0:
        raise DataError(f"no complete window lies inside {format_time(start)} .. {format_time(end)}")
    return samples.subset(idx)


def evaluate_checkpoint(checkpoint, data_dir, partition: str = "test", start=None, end=None,
                        out_dir=None) -> dict:
    """Loss/R² (standardized) plus R²/cc in meters; optional SVGs into ``out_dir``."""
    model, meta = load_model(_require(checkpoint))
    ds = load_dataset(data_dir)
    grid_shape = tuple(ds.grid.grid.shape[1:])
    if grid_shape != tuple(model.grid):
        raise DimensionError(f"checkpoint expects grid {tuple(model.grid)}, dataset has {grid_shape}")
    std = Standardizer.from_dict(meta["standardizer"]) if "standardizer" in meta else None
    train, val, test, std = partitions(ds, model.steps, int(meta.get("stride", model.steps)),
                                       SplitSpec(meta.get("train_end", SplitSpec().train_end)), std)
    if start is not None or end is not None:
        if start is None or end is None:
            raise ConfigError("a time window needs both --start and --end")
        everything = _concat_sets(train, val, test)
        samples, name = _select_window(everything, start, end), f"{start}..{end}"
    else:
        if partition not in ("train", "val", "test"):
            raise ConfigError(f"partition must be train, val or test, got {partition!r}")
        samples, name = {"train": train, "val": val, "test": test}[partition], partition
    std_metrics = evaluate(model, samples)
    pred, truth = _meters(model, samples, std)
    result = {"architecture": model.kind.value, "selection": name, "n_windows": len(samples),
              "loss": std_metrics["loss"], "r2_standardized": std_metrics["r2"],
              "stored_train_loss": meta.get("train_loss"), **_metrics_m(pred, truth)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        label = model.kind.label
        plots.time_series_svg(out / "eval_timeseries.svg", samples.hourly_index().ravel(), truth.ravel(),
                              {label: pred.ravel()}, name)
        plots.scatter_svg(out / "eval_scatter.svg", truth, {label: pred}, {label: result["cc"]}, name)
        (out / "eval_metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


def _concat_sets(*sets):
    from .data import SampleSet

    cat = lambda name: np.concatenate([getattr(s, name) for s in sets])
    return SampleSet(cat("atmos"), cat("tide"), cat("surge"), cat("starts"), sets[0].steps, sets[0].standardizer)


def evaluate_predictions(path, start=None, end=None, out_dir=None, label: str = "Model") -> dict:
    cols = read_predictions(path)
    keep = np.ones(cols["timestamp"].size, dtype=bool)
    if start is not None:
        keep &= cols["timestamp"] >= parse_time(start)
    if end is not None:
        keep &= cols["timestamp"] <= parse_time(end)
    if keep.sum() < 2:
        raise DataError("fewer than 2 prediction rows in the selected window")
    t, y, p = cols["timestamp"][keep], cols["measured_m"][keep], cols["predicted_m"][keep]
    result = {"selection": f"{start or 'start'}..{end or 'end'}", **_metrics_m(p, y)}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        plots.time_series_svg(out / "eval_timeseries.svg", t, y, {label: p})
        plots.scatter_svg(out / "eval_scatter.svg", y, {label: p}, {label: result["cc"]})
        (out / "eval_metrics.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return result


# -- comparison ---------------------------------------------------------------

@dataclass
class RunDir:
    path: Path
    report: MetricsReport
    predictions: dict


def load_run(path) -> RunDir:
    path = _require(path)
    metrics = json.loads(_require(path / "metrics.json").read_text())
    timing_path = path / "timing.json"
    timing = json.loads(timing_path.read_text()) if timing_path.exists() else None
    return RunDir(path, MetricsReport.from_dicts(metrics, timing), read_predictions(path / "predictions.csv"))


def compare_runs(run_dirs, out_dir=None, start=None, end=None) -> str:
    """Table-1 style comparison plus overlaid loss curves, time series and scatter plots."""
    if len(run_dirs) < 2:
        raise ConfigError(f"comparison needs at least 2 run directories, got {len(run_dirs)}")
    runs = [load_run(p) for p in run_dirs]
    ref = runs[0].report.config
    for r in runs[1:]:
        cfg = r.report.config
        for key, what in (("dataset_fingerprint", "dataset"), ("standardizer", "standardizer"),
                          ("train_end", "train/test split"), ("steps", "window length"), ("stride", "stride")):
            if cfg.get(key) != ref.get(key):
                raise ConfigError(f"{r.path} and {runs[0].path} use a different {what}; "
                                  "metrics would not be comparable")
    table = format_table([r.report for r in runs])
    if out_dir is None:
        return table
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "table.txt").write_text(table)
    curves, preds, ccs = {}, {}, {}
    for r in runs:
        label = kind_label(r.report.architecture)
        ok = r.report.valid_runs
        if ok:
            tr = np.mean([[c["train_loss"] for c in x.curves] for x in ok], axis=0)
            va = np.mean([[c["val_loss"] for c in x.curves] for x in ok], axis=0)
            curves[label] = (tr, va)
    plots.loss_curves_svg(out / "loss_curves.svg", curves)
    base = runs[0].predictions
    for r in runs:
        if not np.array_equal(r.predictions["timestamp"], base["timestamp"]):
            raise ConfigError(f"{r.path}: predictions cover different timestamps")
    if start is not None and end is not None:
        mask = (base["timestamp"] >= parse_time(start)) & (base["timestamp"] <= parse_time(end))
        title = f"{start} .. {end}"
    else:
        # case study: the test window holding the largest measured deviation from the tide
        w = base["window"]
        dev = np.abs(base["measured_m"] - _tide_or_zero(runs[0].path / "predictions.csv"))
        mask = w == w[int(np.argmax(dev))]
        title = "Extreme test window"
    if mask.sum() < 2:
        raise DataError("selected comparison window has fewer than 2 points")
    for r in runs:
        label = kind_label(r.report.architecture)
        preds[label] = r.predictions["predicted_m"][mask]
        ccs[label] = correlation_coefficient(preds[label], base["measured_m"][mask])
    plots.time_series_svg(out / "case_timeseries.svg", base["timestamp"][mask], base["measured_m"][mask], preds, title)
    plots.scatter_svg(out / "case_scatter.svg", base["measured_m"][mask], preds, ccs, title)
    full = {kind_label(r.report.architecture): r.predictions["predicted_m"] for r in runs}
    full_cc = {k: correlation_coefficient(v, base["measured_m"]) for k, v in full.items()}
    plots.scatter_svg(out / "test_scatter.svg", base["measured_m"], full, full_cc, "Test partition")
    return table


def _tide_or_zero(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([float(r.get("tide_m") or 0.0) for r in rows])


def run_dir_for(out, arch: str) -> str:
    return os.path.join(out, ArchitectureKind.parse(arch).value)
