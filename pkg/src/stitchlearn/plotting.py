"""SVG figure rendering for the report path.

Noise-level curves are drawn iteration vs noise fraction with one series per
class subset; training curves track the ensemble mAP and branch losses.
Figures are written deterministically: fixed hash salt, no embedded date.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "stitchlearn"

_SUBSET_STYLE = (
    ("noise_total", "total", "#333333"),
    ("noise_head", "head", "#1f77b4"),
    ("noise_medium", "medium", "#ff7f0e"),
    ("noise_tail", "tail", "#2ca02c"),
)


def _save(fig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def plot_noise_curves(records: Sequence, path, title: str = "training-stream noise") -> None:
    """One line per subset over the recorded windows (mirrors the noise CSV)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    iters = [r.iteration for r in records]
    for attr, label, color in _SUBSET_STYLE:
        ax.plot(iters, [getattr(r, attr) for r in records], label=label, color=color)
    ax.set_xlabel("iteration")
    ax.set_ylabel("noise fraction")
    ax.set_ylim(bottom=0.0)
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_noise_comparison(
    series: dict[str, Sequence], path, title: str = "noise with vs without stitch"
) -> None:
    """Total-noise curves of several runs on one axis (e.g. stitch on vs off)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, records in series.items():
        ax.plot(
            [r.iteration for r in records],
            [r.noise_total for r in records],
            label=name,
        )
    ax.set_xlabel("iteration")
    ax.set_ylabel("noise fraction")
    ax.set_ylim(bottom=0.0)
    ax.set_title(title)
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_training_curves(metrics_rows: Sequence[dict], path) -> None:
    """Ensemble mAP and branch losses over the eval ticks."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    iters = [r["iteration"] for r in metrics_rows]
    for key, label in (
        ("map_total", "total"),
        ("map_head", "head"),
        ("map_medium", "medium"),
        ("map_tail", "tail"),
    ):
        values = [r.get(key) for r in metrics_rows]
        if any(v is not None for v in values):
            ax1.plot(iters, values, label=label)
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("mAP")
    ax1.set_ylim(0.0, 1.0)
    ax1.legend(fontsize=8)
    for key, label in (("loss_random", "random"), ("loss_balanced", "balanced")):
        values = [r.get(key) for r in metrics_rows]
        if any(v is not None for v in values):
            ax2.plot(iters, values, label=label)
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("loss")
    ax2.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def plot_map_vs_gamma(rows: Sequence[dict], path) -> None:
    """Aggregate mAP against the noise rate, one line per method."""
    methods: dict[str, list] = {}
    for row in rows:
        methods.setdefault(row["method"], []).append(row)
    fig, ax = plt.subplots(figsize=(6, 4))
    for method, mrows in sorted(methods.items()):
        mrows = sorted(mrows, key=lambda r: float(r["gamma"]))
        gammas = [float(r["gamma"]) for r in mrows]
        means = [float(r["map_total_mean"]) for r in mrows]
        bands = [float(r["map_total_ci95"] or 0.0) for r in mrows]
        ax.errorbar(gammas, means, yerr=bands, marker="o", capsize=3, label=method)
    ax.set_xlabel("noise rate")
    ax.set_ylabel("total mAP")
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
