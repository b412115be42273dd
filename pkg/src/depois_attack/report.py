"""Figures and tables rendered from sweep records.

Figures are written as SVG and PNG with metadata that would vary between
runs (dates, random ids) suppressed, so re-rendering the same CSV gives the
same bytes.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .attacks import AttackMode  # noqa: E402
from .metrics import ACCESS_MODES, SweepRecord, overall_table, table_to_csv, table_to_markdown  # noqa: E402

LABELS = {
    AttackMode.CRITIC_ONLY: "Critic-only",
    AttackMode.CLASSIFIER_ONLY: "Classifier-only",
    AttackMode.CRITIC_THEN_CLASSIFIER: "Critic-Classifier",
    AttackMode.CLASSIFIER_THEN_CRITIC: "Classifier-Critic",
}
MARKERS = {
    AttackMode.CRITIC_ONLY: "o",
    AttackMode.CLASSIFIER_ONLY: "s",
    AttackMode.CRITIC_THEN_CLASSIFIER: "^",
    AttackMode.CLASSIFIER_THEN_CRITIC: "v",
}
METRIC_NAMES = {"ca": "Critic accuracy (ca)", "da": "De-Pois accuracy (da)"}
STYLE = {
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.fontsize": 8,
    "figure.figsize": (4.5, 3.2),
    "svg.hashsalt": "depois-attack",
    "svg.fonttype": "path",
}


def _save(fig, stem: Path) -> list[Path]:
    stem.parent.mkdir(parents=True, exist_ok=True)
    paths = [stem.with_suffix(".svg"), stem.with_suffix(".png")]
    with plt.rc_context(STYLE):
        fig.savefig(paths[0], metadata={"Date": None, "Creator": None})
        fig.savefig(paths[1], dpi=150, metadata={"Software": None})
    plt.close(fig)
    return paths


def metric_figure(records: Sequence[SweepRecord], access: str, metric: str):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for mode in AttackMode:
            rows = sorted((r for r in records if r.access == access and r.mode == mode), key=lambda r: r.epsilon)
            if not rows:
                continue
            ax.plot(
                [r.epsilon for r in rows],
                [getattr(r, metric) for r in rows],
                marker=MARKERS[mode],
                markersize=3.5,
                linewidth=1.2,
                label=LABELS[mode],
            )
        ax.set_xlabel("Perturbation budget $\\epsilon$")
        ax.set_ylabel(METRIC_NAMES[metric])
        ax.set_ylim(-0.02, 1.02)
        ax.set_title(f"{METRIC_NAMES[metric]}, {access}-box", fontsize=9)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
    return fig


def overall_figure(records: Sequence[SweepRecord]):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for access, style in (("white", "-"), ("black", "--")):
            rows = sorted(
                (r for r in records if r.access == access and r.mode == AttackMode.CRITIC_THEN_CLASSIFIER),
                key=lambda r: r.epsilon,
            )
            if rows:
                ax.plot([r.epsilon for r in rows], [r.da for r in rows], style, marker="^", markersize=3.5, label=f"{access}-box")
        ax.set_xlabel("Perturbation budget $\\epsilon$")
        ax.set_ylabel(METRIC_NAMES["da"])
        ax.set_ylim(-0.02, 1.02)
        ax.set_title("Critic-Classifier: white-box vs black-box", fontsize=9)
        ax.legend(loc="best", frameon=False)
        fig.tight_layout()
    return fig


def render(records: Sequence[SweepRecord], out_dir, table_epsilon: float = 0.7) -> list[Path]:
    """Write all figures plus the summary table; returns the written paths."""
    out_dir = Path(out_dir)
    written = []
    for access in ACCESS_MODES:
        if not any(r.access == access for r in records):
            continue
        for metric in ("ca", "da"):
            written += _save(metric_figure(records, access, metric), out_dir / "figures" / f"{metric}_{access}")
    if any(r.mode == AttackMode.CRITIC_THEN_CLASSIFIER for r in records):
        written += _save(overall_figure(records), out_dir / "figures" / "overall_da")
    rows = overall_table(records, table_epsilon)
    (out_dir / "table.csv").write_text(table_to_csv(rows))
    (out_dir / "table.md").write_text(table_to_markdown(rows))
    written += [out_dir / "table.csv", out_dir / "table.md"]
    return written
