"""Figures written next to the CLI's delimited outputs (PNG, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
    # keep PNG bytes stable across runs
    "svg.hashsalt": "pivotseg",
}
PNG_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, metadata=PNG_META)
    plt.close(fig)
    return path


def complexity_plot(rows: list[dict], path) -> Path:
    """Log-log MAC counts against sequence length for each encoder."""
    L = np.array([r["L"] for r in rows], dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.loglog(L, [r["vanilla_macs"] for r in rows], "o-", label="full attention")
        ax.loglog(L, [r["pivot_macs"] for r in rows], "s-", label="pivot, N = sqrt(L)")
        if all("counted_macs" in r for r in rows):
            ax.loglog(L, [r["counted_macs"] for r in rows], "k.", ms=4, label="counted")
        ax.set_xlabel("sequence length L")
        ax.set_ylabel("attention multiply-accumulates")
        ax.legend()
        return _save(fig, path)


def training_curve(epochs: list[dict], path) -> Path:
    """Mean train loss and validation AP@0.5 per epoch; the kept epoch is marked."""
    ep = [e["epoch"] for e in epochs]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        ax.plot(ep, [e["train_loss"] for e in epochs], "o-", color="C0")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train loss", color="C0")
        ax2 = ax.twinx()
        ax2.plot(ep, [e["val_ap50"] for e in epochs], "s--", color="C1")
        ax2.set_ylabel("validation AP@0.5", color="C1")
        ax2.set_ylim(-0.02, 1.02)
        ax2.grid(False)
        for e in epochs:
            if e.get("selected"):
                ax.axvline(e["epoch"], color="0.5", lw=0.8)
        return _save(fig, path)


def score_plot(h, b, proposals, truth, path, title: str = "") -> Path:
    """Per-utterance scores with predicted spans above and ground truth below."""
    x = np.arange(len(h))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8.0, 3.2))
        ax.plot(x, h, "-", color="C0", label="highlight h")
        ax.plot(x, b, "-", color="C3", lw=0.9, label="boundary b")
        for p in proposals:
            ax.axvspan(p[0] - 0.5, p[1] + 0.5, ymin=0.92, ymax=1.0, color="C2", alpha=0.8)
        for s, e in truth:
            ax.axvspan(s - 0.5, e + 0.5, ymin=0.0, ymax=0.06, color="k", alpha=0.6)
        ax.set_ylim(-0.05, 1.1)
        ax.set_xlim(-0.5, len(h) - 0.5)
        ax.set_xlabel("utterance")
        if title:
            ax.set_title(title)
        ax.legend(loc="center right")
        return _save(fig, path)


def pr_plot(curves: dict, path) -> Path:
    """Precision/recall points per tIoU threshold."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.8, 4.0))
        for thr, (recall, precision) in curves.items():
            ax.step(recall, precision, where="post", label=f"tIoU {thr:.1f}")
        ax.set_xlim(0, 1.02)
        ax.set_ylim(0, 1.05)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.legend()
        return _save(fig, path)
