"""Report figures, rendered headless to PNG next to the CSV/JSON outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .contour import AffectContour, DeltaSeries, SegmentLabels  # noqa: E402
from .metrics import FoldReport  # noqa: E402
from .training import TrainHistory  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # no Software/date metadata, so identical inputs give identical files
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_labels(contour: AffectContour, delta: DeltaSeries, labels: SegmentLabels, tau: float, path,
                title: str = "") -> Path:
    """Contour with shaded burst segments above, delta with the +-tau band below."""
    t = np.arange(len(contour.values)) / contour.frame_rate_hz
    fig, (ax0, ax1) = plt.subplots(2, 1, sharex=True, figsize=(10, 4.5))
    ax0.plot(t, contour.values, lw=1, color="k")
    on = labels.values.astype(bool)
    ax0.fill_between(t, 0, 1, where=on, color="tab:orange", alpha=0.3, step="mid",
                     transform=ax0.get_xaxis_transform(), label="burst segment")
    ax0.set_ylabel(contour.attribute_name or "contour")
    ax0.legend(loc="upper right", fontsize=8)
    ax1.plot(t, delta.values, lw=1, color="tab:blue")
    if np.isfinite(tau):
        for s in (tau, -tau):
            ax1.axhline(s, ls="--", lw=0.8, color="tab:red")
    ax1.set_ylabel("delta")
    ax1.set_xlabel("time [s]")
    if title:
        ax0.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_histories(histories: Mapping[int, TrainHistory], path) -> Path:
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 3.5))
    for fid, h in sorted(histories.items()):
        ep = np.arange(1, h.epochs_run + 1)
        ax0.plot(ep, h.train_loss, label=f"fold {fid}")
        ax1.plot(ep, h.val_uaf1, label=f"fold {fid}")
        if h.best_epoch:
            ax1.plot(h.best_epoch, h.val_uaf1[h.best_epoch - 1], "k.", ms=6)
    ax0.set(xlabel="epoch", ylabel="weighted training loss")
    ax1.set(xlabel="epoch", ylabel="validation UAF1")
    ax1.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    return _save(fig, path)


def plot_fold_metrics(reports: Sequence[FoldReport], path) -> Path:
    ids = [str(r.fold_id) for r in reports]
    x = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(ids) + 2), 3.5))
    ax.bar(x - 0.2, [r.uaf1 for r in reports], 0.4, label="UAF1")
    ax.bar(x + 0.2, [r.uar for r in reports], 0.4, label="UAR")
    ax.axhline(0.5, ls=":", color="gray", lw=1)
    ax.set_xticks(x, ids)
    ax.set(xlabel="fold", ylim=(0, 1))
    if reports:
        ax.set_title(f"{reports[0].model} / {reports[0].attribute}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)


def plot_segment_durations(durations_s: Mapping[str, np.ndarray], path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, d in sorted(durations_s.items()):
        if len(d):
            ax.hist(d, bins=30, alpha=0.5, label=name)
    ax.set(xlabel="segment duration [s]", ylabel="count")
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
