"""SVG charts for evaluation reports (matplotlib, headless)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# fixed hash salt and no date stamp keep the SVG bytes reproducible
matplotlib.rcParams["svg.hashsalt"] = "cpgc"


def asr_bar_chart(reports: Sequence, path: str | Path, k: int = 1, title: str | None = None) -> Path:
    """Grouped bars of ASR@k per target (TR and IR side by side); white-box targets are starred."""
    rows = [r for r in reports if r.k == k]
    targets = sorted({r.target_id for r in rows})
    labels = [t + (" *" if any(r.white_box for r in rows if r.target_id == t) else "") for t in targets]
    x = np.arange(len(targets))
    fig, ax = plt.subplots(figsize=(1.2 + 1.3 * max(len(targets), 1), 3.2))
    for offset, task in ((-0.18, "TR"), (0.18, "IR")):
        vals = [next((r.asr for r in rows if r.target_id == t and r.task == task), np.nan) for t in targets]
        ax.bar(x + offset, vals, width=0.36, label=task)
    ax.set_xticks(x, labels, rotation=20, ha="right")
    ax.set_ylim(0, 1)
    ax.set_ylabel(f"ASR@{k}")
    ax.set_title(title or f"ASR@{k} per target (* = white-box)", fontsize=9)
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def loss_curve(trace_rows: Sequence, path: str | Path) -> Path:
    """Per-epoch mean total loss for each generator branch."""
    fig, ax = plt.subplots(figsize=(4.5, 3.0))
    for branch in sorted({r.branch for r in trace_rows}):
        rows = [r for r in trace_rows if r.branch == branch]
        epochs = sorted({r.epoch for r in rows})
        ax.plot(epochs, [np.mean([r.total for r in rows if r.epoch == e]) for e in epochs], marker="o", label=branch)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.legend(fontsize=8)
    fig.tight_layout()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path
