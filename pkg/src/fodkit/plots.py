"""Matplotlib figure rendering for the report path.

Every CLI command that emits a JSON/CSV report also renders the matching
figures next to it (PNG, Agg backend). The metrics module stays free of
plotting; these helpers consume EvalReports.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import cdf_bin_edges

_COLORS = ["#377eb8", "#e41a1c", "#4daf4a", "#984ea3", "#ff7f00", "#a65628"]


def _new_axes(width=6.0):
    golden = (5 ** 0.5 - 1) / 2
    fig, ax = plt.subplots(figsize=(width, width * golden))
    return fig, ax


def acc_cdf_figure(reports, path):
    """Overlayed ACC cumulative distribution curves, one per method."""
    fig, ax = _new_axes()
    edges = cdf_bin_edges()
    for i, (name, report) in enumerate(reports.items()):
        ax.plot(edges, report.cdf, label=name, color=_COLORS[i % len(_COLORS)], lw=1.5)
    ax.set_xlabel("ACC")
    ax.set_ylabel("cumulative fraction of WM voxels")
    ax.set_xlim(-0.05, 1.0)
    ax.set_ylim(0, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(loc="upper left", fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def acc_hist_figure(report, path, bins=80):
    fig, ax = _new_axes()
    acc = report.acc_map[report.acc_map != 0.0]
    ax.hist(np.clip(acc, -1, 1), bins=bins, range=(-1, 1), color=_COLORS[0], alpha=0.85)
    ax.axvline(report.acc_median, color=_COLORS[1], ls="--", lw=1,
               label=f"median {report.acc_median:.3f}")
    ax.set_xlabel("ACC")
    ax.set_ylabel("WM voxels")
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def region_summary_figure(reports, path):
    """Per-region ACC median with IQR whiskers, grouped by method."""
    fig, ax = _new_axes(7.0)
    methods = list(reports.keys())
    labels = sorted({k for r in reports.values() for k in r.region_stats},
                    key=lambda s: int(s))
    width = 0.8 / max(len(methods), 1)
    for i, method in enumerate(methods):
        stats = reports[method].region_stats
        xs, meds, lo, hi = [], [], [], []
        for j, label in enumerate(labels):
            if label not in stats:
                continue
            s = stats[label]
            xs.append(j + (i - (len(methods) - 1) / 2) * width)
            meds.append(s["median"])
            lo.append(s["median"] - s["q1"])
            hi.append(s["q3"] - s["median"])
        ax.errorbar(xs, meds, yerr=[lo, hi], fmt="o", capsize=3, markersize=4,
                    color=_COLORS[i % len(_COLORS)], label=method)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels([f"region {l}" for l in labels])
    ax.set_ylabel("ACC (median, IQR)")
    ax.grid(alpha=0.3, axis="y")
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def subsample_trend_figure(per_fraction, path):
    """Median ACC against subsample fraction for each method.

    per_fraction: {fraction: {method: EvalReport}}.
    """
    fig, ax = _new_axes()
    fractions = sorted(per_fraction.keys())
    methods = list(next(iter(per_fraction.values())).keys())
    for i, method in enumerate(methods):
        meds = [per_fraction[f][method].acc_median for f in fractions]
        ax.plot(fractions, meds, "o-", color=_COLORS[i % len(_COLORS)], label=method)
    ax.set_xlabel("gradient-direction fraction kept")
    ax.set_ylabel("median ACC")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def loss_history_figure(history, path):
    fig, ax = _new_axes()
    epochs = [h[0] for h in history]
    ax.semilogy(epochs, [h[1] for h in history], label="train", color=_COLORS[0])
    val = [(e, v) for e, _, v, _ in history if v == v]
    if val:
        ax.semilogy([v[0] for v in val], [v[1] for v in val], "o-", ms=3,
                    label="validation", color=_COLORS[1])
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
