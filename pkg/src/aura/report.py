"""Benchmark report figures, rendered to files next to the delimited output."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .fusion import DetectionEvent, Verdict
from .harness import MetricsReport


def render_benchmark_figures(
    reports: dict[str, MetricsReport],
    events: dict[str, list[DetectionEvent]],
    out_dir: str | Path,
) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    written.append(_f1_bars(reports, out / "f1_by_condition.png"))
    written.append(_probability_timelines(events, out / "probability_timeline.png"))
    return written


def _f1_bars(reports: dict[str, MetricsReport], path: Path) -> Path:
    names = list(reports)
    f1s = [reports[n].f1 for n in names]
    fig, ax = plt.subplots(figsize=(7, 3.6))
    bars = ax.bar(names, f1s, color="#3b6ea5")
    for bar, v in zip(bars, f1s):
        ax.text(
            bar.get_x() + bar.get_width() / 2, v + 0.015, f"{v:.3f}",
            ha="center", va="bottom", fontsize=8,
        )
    ax.set_ylim(0, 1.1)
    ax.set_ylabel("F1")
    ax.set_title("Window-level F1 by condition")
    ax.tick_params(axis="x", rotation=20)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def _probability_timelines(
    events: dict[str, list[DetectionEvent]], path: Path
) -> Path:
    fig, axes = plt.subplots(
        len(events), 1, figsize=(8, 1.8 * max(len(events), 1)), sharex=True
    )
    if len(events) == 1:
        axes = [axes]
    for ax, (name, evs) in zip(axes, events.items()):
        windows = [e.window_index for e in evs]
        probs = [e.probability for e in evs]
        detected = [
            e.window_index for e in evs if e.verdict == Verdict.PLUME_DETECTED
        ]
        ax.plot(windows, probs, lw=1.0, color="#3b6ea5")
        if detected:
            ax.scatter(
                detected,
                [1.04] * len(detected),
                marker="|",
                color="#c23b22",
                s=40,
                label="detected",
            )
        ax.set_ylim(0, 1.1)
        ax.set_ylabel(name, fontsize=8)
    axes[-1].set_xlabel("window")
    fig.suptitle("Fused detection probability per window")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
