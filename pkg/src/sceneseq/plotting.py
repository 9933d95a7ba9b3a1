"""Report figures. Rendering is headless (Agg) and byte-stable across runs."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# column plotted per benchmark, and threshold lines drawn on it
_SCORE_COLUMN = {
    "scanrefer": ("iou", "IoU with ground truth"),
    "multi3dref": (None, None),
    "scan2cap": ("cider", "CIDEr"),
    "scanqa": ("cider", "CIDEr"),
    "sqa3d": ("em_r", "EM-R"),
    "stiou": ("st_iou", "ST-IoU"),
}

RC = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "svg.hashsalt": "sceneseq",
}


def _save(fig, path):
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_aggregates(report, path):
    keys = [k for k in report.aggregates if k != "n"]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        vals = [report.aggregates[k] for k in keys]
        ax.bar(range(len(keys)), vals, color="0.35")
        ax.set_xticks(range(len(keys)))
        ax.set_xticklabels(keys, rotation=30, ha="right")
        ax.set_title(f"{report.benchmark} (n={report.aggregates.get('n', len(report.rows))})")
        for i, v in enumerate(vals):
            ax.annotate(f"{v:.3f}", (i, v), ha="center", va="bottom", fontsize=7)
        fig.tight_layout()
        _save(fig, path)


def plot_score_histogram(report, path):
    col, label = _SCORE_COLUMN[report.benchmark]
    if col is None or not report.rows:
        return False
    scores = [r[col] for r in report.rows]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4.5, 3))
        ax.hist(scores, bins=20, color="0.55", edgecolor="0.2")
        if report.benchmark in ("scanrefer", "stiou"):
            for t in report.config.get("thresholds", ()):
                ax.axvline(t, color="k", ls="--", lw=0.8)
        ax.set_xlabel(label)
        ax.set_ylabel("samples")
        fig.tight_layout()
        _save(fig, path)
    return True


def render_report_figures(report, out_dir) -> list:
    """Write the figures for ``report`` into ``out_dir``; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    p = os.path.join(out_dir, "aggregates.png")
    plot_aggregates(report, p)
    written.append("aggregates.png")
    p = os.path.join(out_dir, "scores_hist.png")
    if plot_score_histogram(report, p):
        written.append("scores_hist.png")
    return written
