"""Static SVG figures: interval log-length box-plots and RB/RRMSE scatter."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed metadata and hash salt keep the SVG bytes reproducible
matplotlib.rcParams["svg.hashsalt"] = "fhme"
_SVG_META = {"Date": None, "Creator": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata=_SVG_META)
    plt.close(fig)
    return path


def log_length_boxplot(lengths: Mapping[str, Sequence[float]], path, title: str = "") -> Path:
    """One box per interval method; non-finite lengths (zero-width intervals) are omitted."""
    labels = list(lengths)
    data = []
    for k in labels:
        v = np.asarray(lengths[k], dtype=float)
        data.append(v[np.isfinite(v)])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.boxplot(data, tick_labels=labels)
    ax.set_ylabel("log length")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def rb_rrmse_scatter(series: Mapping[str, tuple[Sequence[float], Sequence[float]]], path, title: str = "") -> Path:
    """Scatter of (RB, RRMSE) pairs, one marker set per predictor."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for (name, (rb, rrmse)), marker in zip(series.items(), "osd^vx"):
        ax.scatter(rb, rrmse, label=name, marker=marker, s=18)
    ax.axvline(0.0, color="grey", lw=0.8)
    ax.set_xlabel("relative bias")
    ax.set_ylabel("relative RMSE")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)
