"""Standalone SVG figures: loss curves, water-level time series and scatter plots."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

COLORS = {"CNN-LSTM": "green", "LSTM": "red", "3DCNN": "blue"}
_FALLBACK = ["purple", "orange", "brown", "gray"]


def _color(label: str, i: int) -> str:
    return COLORS.get(label, _FALLBACK[i % len(_FALLBACK)])


def _save(fig, path) -> None:
    with matplotlib.rc_context({"svg.hashsalt": "surgekit", "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)


def loss_curves_svg(path, curves: dict) -> None:
    """``curves``: label -> ``(train_losses, val_losses)`` per epoch; solid train, dashed val."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for i, (label, (train, val)) in enumerate(curves.items()):
        epochs = np.arange(1, len(train) + 1)
        c = _color(label, i)
        ax.plot(epochs, train, color=c, lw=1.6, label=f"{label} train")
        ax.plot(epochs, val, color=c, lw=1.6, ls="--", label=f"{label} validation")
    ax.set_xlabel("Epoch")
    ax.set_ylabel("Loss (MSE, standardized)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    _save(fig, path)


def time_series_svg(path, times, measured, predictions: dict, title: str = "") -> None:
    """Measured level in black, one colored line per model."""
    fig, ax = plt.subplots(figsize=(9, 4))
    t = np.asarray(times, dtype="datetime64[h]").astype("datetime64[s]").astype(object)
    ax.plot(t, measured, color="black", lw=1.8, label="Measured")
    for i, (label, pred) in enumerate(predictions.items()):
        ax.plot(t, pred, color=_color(label, i), lw=1.2, label=label)
    ax.axhline(0.0, color="0.6", lw=0.6)
    ax.set_ylabel("Water level relative to MSL (m)")
    ax.set_xlabel("Time (UTC)")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8)
    fig.autofmt_xdate()
    _save(fig, path)


def scatter_svg(path, measured, predictions: dict, ccs: dict, title: str = "") -> None:
    """One panel per model: prediction vs measured with a y=x guide and the cc in the corner."""
    n = max(len(predictions), 1)
    fig, axes = plt.subplots(1, n, figsize=(4 * n, 4), squeeze=False)
    y = np.asarray(measured, dtype=np.float64).ravel()
    for i, (ax, (label, pred)) in enumerate(zip(axes[0], predictions.items())):
        p = np.asarray(pred, dtype=np.float64).ravel()
        lo, hi = float(min(y.min(), p.min())), float(max(y.max(), p.max()))
        pad = 0.05 * (hi - lo or 1.0)
        ax.scatter(y, p, s=6, alpha=0.5, color=_color(label, i), edgecolors="none")
        ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="black", lw=1, ls="--")
        ax.set_xlim(lo - pad, hi + pad)
        ax.set_ylim(lo - pad, hi + pad)
        ax.set_aspect("equal")
        ax.set_xlabel("Measured (m)")
        ax.set_ylabel("Predicted (m)")
        ax.set_title(label)
        ax.text(0.05, 0.92, f"cc = {ccs[label]:.2f}", transform=ax.transAxes)
        ax.grid(alpha=0.3)
    if title:
        fig.suptitle(title)
    _save(fig, path)
