"""Rendered artifacts: delimited tables, metrics files, and figures.

Every table starts with a comment line recording the seed and the
methodology choices a reader would otherwise have to guess (the load
table's Std column is a population standard deviation). Group numbering
is 1-based here and only here; everything upstream indexes from 0.
Figures are rendered with the Agg backend so headless runs work.
"""

from __future__ import annotations

import csv
import json

import numpy as np

from .allocation import PlacementPlan, per_gpu_params
from .config import ModelConfig
from .simulator import DifficultyReport, GroupTrafficHistogram, LoadReport

__all__ = [
    "write_metrics",
    "write_load_table",
    "write_difficulty_table",
    "write_histogram_table",
    "render_load_figure",
    "render_difficulty_figure",
    "render_histogram_figure",
]


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def write_metrics(path: str, history, seed: int) -> None:
    """One JSON object per logging interval, in step order."""
    with open(path, "w", encoding="utf-8") as fh:
        for m in history:
            fh.write(
                json.dumps(
                    {
                        "step": m.step,
                        "task_loss": m.task_loss,
                        "loss_group": m.loss_group,
                        "loss_expert": m.loss_expert,
                        "group_counts": m.group_counts,
                        "seed": seed,
                    },
                    sort_keys=True,
                )
                + "\n"
            )


def write_load_table(
    path: str,
    report: LoadReport,
    plan: PlacementPlan,
    config: ModelConfig,
    seed: int,
) -> None:
    """Per-group GPU load fractions with an Std column.

    The second comment line carries the per-GPU parameter totals, which
    under a strict plan are all equal.
    """
    totals = per_gpu_params(plan, config)
    ratio = totals.max() / totals.min()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(
            f"# seed={seed} tokens={report.token_count} plan={plan.mode} "
            "std=population\n"
        )
        fh.write(
            f"# per_gpu_params={','.join(str(int(t)) for t in totals)} "
            f"param_spread_ratio={ratio:.4f}\n"
        )
        writer = csv.writer(fh)
        writer.writerow(
            ["group", "width"]
            + [f"gpu{d}" for d in range(report.num_gpus)]
            + ["std", "selections"]
        )
        for g in range(config.num_groups):
            row = [g + 1, config.group_widths[g]]
            row += [f"{f:.6f}" for f in report.fractions[g]]
            row += [f"{report.per_group_std[g]:.6f}", int(report.per_group_tokens[g])]
            writer.writerow(row)
        writer.writerow(
            ["param_weighted", ""]
            + [f"{f:.6f}" for f in report.param_weighted_load]
            + ["", ""]
        )


def write_difficulty_table(
    path: str, report: DifficultyReport, config: ModelConfig, seed: int
) -> None:
    """Bucket-by-group routing shares, one row per difficulty bucket."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={seed} scheme={report.scheme}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["bucket"]
            + [f"group{g + 1}" for g in range(config.num_groups)]
            + ["mean_width"]
        )
        for b, name in enumerate(report.bucket_names):
            row = [name] + [f"{r:.6f}" for r in report.ratios[b]]
            mw = report.mean_selected_width[b]
            row.append("empty" if b in report.empty_buckets else f"{mw:.1f}")
            writer.writerow(row)


def write_histogram_table(
    path: str,
    histograms: list[GroupTrafficHistogram],
    config: ModelConfig,
    seed: int,
) -> None:
    """Group traffic counts, long format, one row per (condition, group)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# seed={seed}\n")
        writer = csv.writer(fh)
        writer.writerow(["condition", "group", "width", "count", "share"])
        for hist in histograms:
            total = hist.counts.sum()
            for g in range(config.num_groups):
                writer.writerow(
                    [
                        hist.condition,
                        g + 1,
                        config.group_widths[g],
                        int(hist.counts[g]),
                        f"{hist.counts[g] / total:.6f}" if total else "",
                    ]
                )


def render_load_figure(path: str, report: LoadReport, config: ModelConfig) -> None:
    """Grouped bars: each group's split across GPUs, uniform line marked."""
    plt = _plt()
    n_g, d = config.num_groups, report.num_gpus
    fig, ax = plt.subplots(figsize=(8, 4))
    xs = np.arange(n_g)
    width = 0.8 / d
    for gpu in range(d):
        ax.bar(
            xs + gpu * width,
            report.fractions[:, gpu],
            width,
            label=f"gpu {gpu}",
        )
    ax.axhline(1.0 / d, color="k", linestyle=":", linewidth=1, label=f"uniform 1/{d}")
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels([str(g + 1) for g in range(n_g)])
    ax.set_xlabel("expert group")
    ax.set_ylabel("fraction of group selections")
    ax.set_title(f"per-GPU load over {report.token_count} tokens")
    ax.legend(fontsize=8, ncol=min(d + 1, 5))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_difficulty_figure(
    path: str, report: DifficultyReport, config: ModelConfig
) -> None:
    """One line per bucket across groups ordered by width."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(8, 4))
    xs = np.arange(config.num_groups)
    for b, name in enumerate(report.bucket_names):
        if b in report.empty_buckets:
            continue
        ax.plot(xs, report.ratios[b], marker="o", label=name)
    ax.set_xticks(xs)
    ax.set_xticklabels(
        [f"{g + 1}\n(w={w})" for g, w in enumerate(config.group_widths)], fontsize=8
    )
    ax.set_xlabel("expert group (ascending width)")
    ax.set_ylabel("share of bucket selections")
    ax.set_title(f"difficulty routing, scheme={report.scheme}")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_histogram_figure(
    path: str, histograms: list[GroupTrafficHistogram], config: ModelConfig
) -> None:
    """Side-by-side group traffic bars, one series per training condition."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(8, 4))
    xs = np.arange(config.num_groups)
    k = max(len(histograms), 1)
    width = 0.8 / k
    for j, hist in enumerate(histograms):
        ax.bar(xs + j * width, hist.counts, width, label=hist.condition)
    ax.set_xticks(xs + 0.4 - width / 2)
    ax.set_xticklabels(
        [f"{g + 1}\n(w={w})" for g, w in enumerate(config.group_widths)], fontsize=8
    )
    ax.set_xlabel("expert group (ascending width)")
    ax.set_ylabel("routed tokens")
    ax.set_title("group traffic by training condition")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
