"""Standalone SVG charts for harness output.

Purely presentational.  Files are written with a fixed hash salt and no
date metadata so reruns produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_pooling_sweep", "plot_samplesize", "plot_comparison"]

plt.rcParams["svg.hashsalt"] = "cnv"


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def _cells(summary, **match):
    return [c for c in summary["cells"] if all(c[k] == v for k, v in match.items())]


def _tag(alpha):
    return f"{alpha:g}".replace(".", "p")


def plot_pooling_sweep(summary: dict, outdir, fraction: float = 1.0) -> list:
    """One loss-versus-pooling chart per learner and level; raw loss is a dashed line."""
    outdir = Path(outdir)
    paths = []
    keys = sorted({(c["learner"], c["quantile"]) for c in summary["cells"]})
    for learner, alpha in keys:
        cal = _cells(summary, learner=learner, quantile=alpha, variant="calibrated", fraction=fraction)
        if not cal:
            continue
        raw = _cells(summary, learner=learner, quantile=alpha, variant="raw", fraction=fraction)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        x = np.arange(len(cal))
        ax.errorbar(x, [c["mean"] for c in cal], yerr=[c["std"] or 0.0 for c in cal],
                    marker="o", capsize=3, label="calibrated")
        if raw:
            ax.axhline(raw[0]["mean"], ls="--", color="gray", label="raw")
        ax.set_xticks(x, [c["pooling"] for c in cal])
        ax.set_xlabel("pooling")
        ax.set_ylabel("test pinball loss")
        ax.set_title(f"{learner}, alpha={alpha:g}")
        ax.legend()
        fig.tight_layout()
        paths.append(_save(fig, outdir / f"pooling_{learner}_{_tag(alpha)}.svg"))
    return paths


def plot_samplesize(summary: dict, outdir) -> list:
    """Loss versus data fraction, one line per pooling, one chart per learner and level."""
    outdir = Path(outdir)
    paths = []
    keys = sorted({(c["learner"], c["quantile"]) for c in summary["cells"]})
    for learner, alpha in keys:
        cells = _cells(summary, learner=learner, quantile=alpha)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for pooling in dict.fromkeys(c["pooling"] for c in cells):
            line = sorted((c for c in cells if c["pooling"] == pooling), key=lambda c: c["fraction"])
            ax.plot([c["fraction"] for c in line], [c["mean"] for c in line], marker="o",
                    label="raw" if pooling == "none" else f"m={pooling}")
        ax.set_xlabel("data fraction")
        ax.set_ylabel("test pinball loss")
        ax.set_title(f"{learner}, alpha={alpha:g}")
        ax.legend()
        fig.tight_layout()
        paths.append(_save(fig, outdir / f"samplesize_{learner}_{_tag(alpha)}.svg"))
    return paths


def plot_comparison(summary: dict, outdir) -> list:
    """Grouped bars of raw and calibrated loss, one chart per level."""
    outdir = Path(outdir)
    paths = []
    for alpha in sorted({c["quantile"] for c in summary["cells"]}):
        learners = sorted({c["learner"] for c in summary["cells"] if c["quantile"] == alpha})
        fig, ax = plt.subplots(figsize=(5, 3.5))
        x = np.arange(len(learners))
        for off, variant in ((-0.2, "raw"), (0.2, "calibrated")):
            means = []
            for ln in learners:
                c = _cells(summary, learner=ln, quantile=alpha, variant=variant)
                means.append(c[0]["mean"] if c else np.nan)
            ax.bar(x + off, means, width=0.4, label=variant)
        ax.set_xticks(x, learners)
        ax.set_ylabel("test pinball loss")
        ax.set_title(f"alpha={alpha:g}")
        ax.legend()
        fig.tight_layout()
        paths.append(_save(fig, outdir / f"comparison_{_tag(alpha)}.svg"))
    return paths
