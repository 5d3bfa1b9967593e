"""Figure rendering for the report paths; every figure lands next to its
delimited point file so either can be consumed downstream."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def save_eta_curve(
    rows: Sequence[tuple[float, float, float, float, float]], path: str | Path
) -> None:
    """mAP and Rank-1 against the missing rate."""
    etas = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(etas, [r[1] for r in rows], "o-", label="mAP")
    ax.plot(etas, [r[2] for r in rows], "s--", label="Rank-1")
    ax.set_xlabel("missing rate")
    ax.set_ylabel("score")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_scenario_bars(
    table: Mapping[str, Mapping[str, float]], path: str | Path
) -> None:
    """Grouped mAP bars: one group per scenario, one bar per run."""
    scenarios = sorted({s for per_run in table.values() for s in per_run})
    runs = sorted(table)
    width = 0.8 / max(len(runs), 1)
    fig, ax = plt.subplots(figsize=(max(5, 1.3 * len(scenarios)), 3.4))
    for i, run in enumerate(runs):
        xs = [j + i * width for j in range(len(scenarios))]
        ys = [table[run].get(s, float("nan")) for s in scenarios]
        ax.bar(xs, ys, width=width, label=run)
    ax.set_xticks([j + 0.4 - width / 2 for j in range(len(scenarios))])
    ax.set_xticklabels(scenarios, rotation=20, ha="right", fontsize=8)
    ax.set_ylabel("mAP")
    ax.set_ylim(0, 1.02)
    ax.grid(axis="y", alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def save_cmc_curves(
    curves: Mapping[str, Sequence[float]], path: str | Path
) -> None:
    """Overlayed CMC curves, one line per run/scenario label."""
    fig, ax = plt.subplots(figsize=(5, 3.4))
    for label in sorted(curves):
        values = curves[label]
        ax.plot(range(1, len(values) + 1), values, marker=".", label=label)
    ax.set_xlabel("rank")
    ax.set_ylabel("CMC")
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
