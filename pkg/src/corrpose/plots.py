"""SVG figures for benchmark reports and noise sweeps."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import DIAMETER_FRACTIONS, MSPD_STEPS  # noqa: E402

# fixed metadata keeps the SVG bytes stable across runs
SVG_META = {"Date": None, "Creator": None}


def _save(fig, path):
    plt.rcParams["svg.hashsalt"] = "corrpose"
    fig.savefig(path, format="svg", metadata=SVG_META)
    plt.close(fig)


def plot_error_histograms(report, path):
    """Histograms of finite MSSD (relative to diameter) and MSPD errors."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    mssd = np.array([r.error.mssd for r in report.records])
    mspd = np.array([r.error.mspd for r in report.records])
    for ax, values, label in ((axes[0], mssd, "MSSD [m]"), (axes[1], mspd, "MSPD [px]")):
        finite = values[np.isfinite(values)]
        ax.hist(finite, bins=20)
        ax.set_xlabel(label)
        ax.set_ylabel("scenes")
    fig.tight_layout()
    _save(fig, path)


def plot_recall_curves(report, path):
    """Recall against threshold for MSSD, MSPD and VSD (mean over tau)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    x = np.arange(1, len(DIAMETER_FRACTIONS) + 1)
    ax.plot(x, report.curves["mssd"], marker="o", label="MSSD")
    ax.plot(x, report.curves["mspd"], marker="s", label="MSPD")
    ax.plot(x, np.mean(report.curves["vsd"], axis=0), marker="^", label="VSD")
    ax.set_xticks(x)
    ax.set_xticklabels([f"{f:.2f}d\n{s:g}r" for f, s in zip(DIAMETER_FRACTIONS, MSPD_STEPS)],
                       fontsize=6)
    ax.set_ylim(-0.02, 1.02)
    ax.set_ylabel("recall")
    ax.legend()
    fig.tight_layout()
    _save(fig, path)


def plot_sweep(param, values, rows, path):
    """AR and per-metric recall against the swept noise parameter."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for key, label in (("ar", "AR"), ("ar_vsd", "VSD"), ("ar_mssd", "MSSD"), ("ar_mspd", "MSPD")):
        ax.plot(values, [r[key] for r in rows], marker="o", label=label)
    ax.set_xlabel(param)
    ax.set_ylabel("average recall")
    ax.set_ylim(-0.02, 1.02)
    ax.legend()
    fig.tight_layout()
    _save(fig, path)
