"""Loss, Adam, the training loop, repeated-holdout runs and regression metrics."""

from __future__ import annotations

import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import ConfigError, DataError, DimensionError, MetricError, TrainingDiverged
from .models import ArchitectureKind, ModelGraph, build_model
from .tensor import GradTape, Parameter, Tensor

METRIC_FIELDS = ("train_loss", "train_r2", "test_loss", "test_r2")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 15
    repeats: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 1 or self.repeats < 1:
            raise ConfigError(f"training settings must be positive: {self}")


def mse_loss(pred: Tensor, truth) -> Tensor:
    truth = tn.as_tensor(truth, dtype=pred.dtype)
    if pred.shape != truth.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs truth {truth.shape}")
    diff = tn.sub(pred, truth)
    return tn.reduce_mean(tn.mul(diff, diff))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, params: list[Parameter], lr: float) -> None:
    """One bias-corrected Adam update from each parameter's ``grad``."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise TrainingDiverged(f"non-finite gradient in parameter {p.name!r}", parameter=p.name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    step = lr / (1.0 - b1 ** state.t)
    bc2 = 1.0 - b2 ** state.t
    for p in params:
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(g)
            state.v[p.name] = np.zeros_like(g)
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.assign(p.value.data - step * m / (np.sqrt(v / bc2) + state.eps))


def _series(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64).ravel()


def r_squared(pred, truth) -> float:
    p, y = _series(pred), _series(truth)
    if p.shape != y.shape:
        raise DimensionError(f"r_squared: {p.shape} vs {y.shape}")
    if y.size < 2:
        raise MetricError("r_squared needs at least 2 points")
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise MetricError("r_squared is undefined for a constant truth series")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def correlation_coefficient(pred, truth) -> float:
    p, y = _series(pred), _series(truth)
    if p.shape != y.shape:
        raise DimensionError(f"correlation_coefficient: {p.shape} vs {y.shape}")
    if y.size < 2:
        raise MetricError("correlation needs at least 2 points")
    pc, yc = p - p.mean(), y - y.mean()
    sp, sy = np.sqrt(np.sum(pc * pc)), np.sqrt(np.sum(yc * yc))
    if sp == 0 or sy == 0:
        raise MetricError("correlation is undefined for a constant series")
    return float(np.clip(np.sum(pc * yc) / (sp * sy), -1.0, 1.0))


def predict(model: ModelGraph, samples, batch_size: int = 64) -> np.ndarray:
    """Infer-mode predictions on the standardized scale, shape ``(N, T, 1)``."""
    atmos, tide, _ = samples.standardized(model.dtype)
    out = [model.forward(atmos[s:s + batch_size], tide[s:s + batch_size], "infer").data
           for s in range(0, len(samples), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(model: ModelGraph, samples, batch_size: int = 64) -> dict:
    """Standardized-scale MSE and R² of infer-mode predictions."""
    pred = predict(model, samples, batch_size)
    target = samples.standardized(model.dtype)[2]
    err = pred.astype(np.float64) - target
    return {"loss": float(np.mean(err * err)), "r2": r_squared(pred, target), "pred": pred}


def _snapshot_buffers(model):
    return [(layer, {k: v.copy() for k, v in layer.buffers().items()}) for layer in model.layers]


def _restore_buffers(snapshot) -> None:
    for layer, bufs in snapshot:
        for k, v in bufs.items():
            layer.set_buffer(k, v)


@dataclass
class FitResult:
    initial_loss: float
    train_loss: list
    val_loss: list

    def curves(self) -> list[dict]:
        return [{"epoch": i + 1, "train_loss": a, "val_loss": b}
                for i, (a, b) in enumerate(zip(self.train_loss, self.val_loss))]


def fit(model: ModelGraph, train, val, cfg: TrainConfig, seed: int | None = None,
        log=None, stop_below: float | None = None) -> FitResult:
    """Minibatch Adam on standardized MSE.

    ``initial_loss`` is a train-mode pass over the training set before any
    update (batch-norm running statistics are restored afterwards), so it is
    comparable with the per-epoch running-average training loss. Validation
    loss is computed in infer mode after every epoch; with ``stop_below`` set,
    training ends after the first epoch whose validation loss is under it.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    atmos, tide, target = train.standardized(model.dtype)
    params = model.parameters()
    state = AdamState()
    n = len(train)

    snapshot = _snapshot_buffers(model)
    total = 0.0
    for s in range(0, n, cfg.batch_size):
        pred = model.forward(atmos[s:s + cfg.batch_size], tide[s:s + cfg.batch_size], "train")
        total += mse_loss(pred, target[s:s + cfg.batch_size]).item() * pred.shape[0]
    _restore_buffers(snapshot)
    result = FitResult(initial_loss=total / n, train_loss=[], val_loss=[])

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            model.zero_grad()
            with GradTape() as tape:
                pred = model.forward(atmos[idx], tide[idx], "train")
                loss = mse_loss(pred, target[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became non-finite in epoch {epoch}", epoch=epoch)
            tn.backward(tape, loss, params)
            try:
                adam_step(state, params, cfg.learning_rate)
            except TrainingDiverged as exc:
                exc.epoch = epoch
                raise
            total += value * idx.size
        result.train_loss.append(total / n)
        result.val_loss.append(evaluate(model, val)["loss"])
        if log is not None:
            log(f"epoch {epoch}/{cfg.epochs} train {result.train_loss[-1]:.5f} val {result.val_loss[-1]:.5f}")
        if stop_below is not None and result.val_loss[-1] < stop_below:
            break
    return result


@dataclass
class RunResult:
    run: int
    seed: int
    initial_loss: float = float("nan")
    train_loss: float = float("nan")
    train_r2: float = float("nan")
    val_loss: float = float("nan")
    test_loss: float = float("nan")
    test_r2: float = float("nan")
    training_time_s: float = 0.0
    diverged: bool = False
    message: str = ""
    curves: list = field(default_factory=list)


@dataclass
class MetricsReport:
    """Per-run metrics for one architecture and their mean over non-diverged runs."""

    architecture: str
    runs: list
    config: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    @property
    def valid_runs(self) -> list:
        return [r for r in self.runs if not r.diverged]

    @property
    def mean(self) -> dict:
        ok = self.valid_runs
        out = {k: (float(np.mean([getattr(r, k) for r in ok])) if ok else float("nan")) for k in METRIC_FIELDS}
        out["val_loss"] = float(np.mean([r.val_loss for r in ok])) if ok else float("nan")
        return out

    @property
    def mean_training_time_s(self) -> float:
        ok = self.valid_runs
        return float(np.mean([r.training_time_s for r in ok])) if ok else float("nan")

    def metrics_dict(self) -> dict:
        """Deterministic content only; wall-clock times live in :meth:`timing_dict`."""
        runs = []
        for r in self.runs:
            d = asdict(r)
            d.pop("training_time_s")
            runs.append(d)
        return {"architecture": self.architecture, "config": self.config, "runs": runs,
                "mean": self.mean, "n_runs": len(self.runs), "n_valid_runs": len(self.valid_runs),
                "warnings": self.warnings}

    def timing_dict(self) -> dict:
        return {"architecture": self.architecture,
                "runs": [r.training_time_s for r in self.runs],
                "mean_training_time_s": self.mean_training_time_s}

    @classmethod
    def from_dicts(cls, metrics: dict, timing: dict | None = None) -> "MetricsReport":
        times = (timing or {}).get("runs", [0.0] * len(metrics["runs"]))
        runs = [RunResult(training_time_s=t, **r) for r, t in zip(metrics["runs"], times)]
        return cls(metrics["architecture"], runs, metrics.get("config", {}), metrics.get("warnings", []))


def derive_seeds(seed: int, run: int) -> tuple[int, int, int]:
    """Independent (init, dropout, shuffle) seeds for one repeat."""
    a, b, c = np.random.SeedSequence([seed, run]).generate_state(3)
    return int(a), int(b), int(c)


def holdout_repeat(kind, train, val, test, cfg: TrainConfig, model_kwargs: dict | None = None,
                   on_run_end=None, log=None) -> MetricsReport:
    """Train ``cfg.repeats`` fresh models and collect Table-1 style metrics.

    ``on_run_end(run_index, model, run_result)`` is called after each
    non-diverged run, e.g. to write a checkpoint.
    """
    kind = ArchitectureKind.parse(kind)
    model_kwargs = dict(model_kwargs or {})
    steps, grid = train.steps, train.atmos.shape[2:]
    report = MetricsReport(kind.value, [], config={**asdict(cfg), **model_kwargs, "steps": steps,
                                                    "grid": list(grid)})
    for run in range(cfg.repeats):
        init_seed, drop_seed, shuffle_seed = derive_seeds(cfg.seed, run)
        result = RunResult(run=run, seed=init_seed)
        model = build_model(kind, steps, grid, seed=init_seed, **model_kwargs)
        model.reseed_dropout(drop_seed)
        started = time.perf_counter()
        try:
            fitted = fit(model, train, val, cfg, seed=shuffle_seed, log=log)
        except TrainingDiverged as exc:
            result.training_time_s = time.perf_counter() - started
            result.diverged = True
            result.message = f"diverged in epoch {exc.epoch}: {exc}"
            msg = f"{kind.value} run {run} {result.message}; excluded from means"
            report.warnings.append(msg)
            warnings.warn(msg, RuntimeWarning, stacklevel=2)
            report.runs.append(result)
            continue
        result.training_time_s = time.perf_counter() - started
        tr, te = evaluate(model, train), evaluate(model, test)
        result.initial_loss = fitted.initial_loss
        result.train_loss, result.train_r2 = tr["loss"], tr["r2"]
        result.test_loss, result.test_r2 = te["loss"], te["r2"]
        result.val_loss = fitted.val_loss[-1]
        result.curves = fitted.curves()
        report.runs.append(result)
        if on_run_end is not None:
            on_run_end(run, model, result)
    return report


def format_table(reports: list[MetricsReport]) -> str:
    """Aligned text table: Train Loss/R², Test Loss/R², Training Time; best per column starred."""
    rows = [(kind_label(r.architecture), r.mean, r.mean_training_time_s) for r in reports]
    columns = [("Train Loss", "train_loss", min), ("Train R2", "train_r2", max),
               ("Test Loss", "test_loss", min), ("Test R2", "test_r2", max)]
    best = {}
    for _, key, pick in columns:
        vals = [m[key] for _, m, _ in rows if np.isfinite(m[key])]
        best[key] = pick(vals) if vals else None
    times = [t for _, _, t in rows if np.isfinite(t)]
    best_time = min(times) if times else None

    header = ["Model"] + [c[0] for c in columns] + ["Training Time (s)"]
    body = []
    for label, m, t in rows:
        cells = [label]
        for _, key, _ in columns:
            mark = "*" if best[key] is not None and m[key] == best[key] else " "
            cells.append(f"{m[key]:.3f}{mark}" if key.endswith("loss") else f"{m[key]:.2f}{mark}")
        cells.append(f"{t:.1f}{'*' if best_time is not None and t == best_time else ' '}")
        body.append(cells)
    widths = [max(len(row[i]) for row in [header, *body]) for i in range(len(header))]
    fmt = lambda row: " | ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths)))
    sep = "-+-".join("-" * w for w in widths)
    lines = [fmt(header), sep, *(fmt(r) for r in body), "", "* best value in column"]
    return "\n".join(lines) + "\n"


def kind_label(value: str) -> str:
    try:
        return ArchitectureKind.parse(value).label
    except ConfigError:
        return value
