"""Render benchmark reports as figures, written next to the data files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from servehub.bench.harness import MemoizationResult, linear_fit
from servehub.bench.report import BenchmarkReport

__all__ = ["render_report", "render_memoization"]

_METRIC_LABELS = {
    "inference_ms": "inference",
    "invocation_ms": "invocation",
    "request_ms": "request",
}


def _bars_with_percentiles(ax, summary: dict[str, dict[str, float]]) -> None:
    metrics = list(_METRIC_LABELS)
    medians = [summary[m]["median"] for m in metrics]
    lower = [max(0.0, summary[m]["median"] - summary[m]["p5"]) for m in metrics]
    upper = [max(0.0, summary[m]["p95"] - summary[m]["median"]) for m in metrics]
    ax.bar(
        [_METRIC_LABELS[m] for m in metrics],
        medians,
        yerr=[lower, upper],
        capsize=4,
        color=["#4c72b0", "#dd8452", "#55a868"],
    )
    ax.set_ylabel("time (ms)")


def render_report(report: BenchmarkReport, path: Path | str) -> Path:
    """Figure for one report; the layout depends on the experiment kind."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    if report.experiment == "overhead_decomposition":
        _bars_with_percentiles(ax, report.summary)
        ax.set_title("median latency with 5th/95th percentiles")
    elif report.experiment == "batching":
        rows = report.parameters.get("rows", [])
        sizes = [r["size"] for r in rows]
        if any("unbatched_total_invocation_ms" in r for r in rows):
            ax.plot(
                sizes,
                [r.get("unbatched_total_invocation_ms") for r in rows],
                marker="o",
                label="unbatched",
            )
        batched = [r.get("batched_total_invocation_ms") for r in rows]
        if any(v is not None for v in batched):
            ax.plot(sizes, batched, marker="s", label="batched")
            if len(sizes) >= 3:
                slope, intercept, r2 = linear_fit(sizes, batched)
                xs = np.linspace(min(sizes), max(sizes), 50)
                ax.plot(xs, slope * xs + intercept, "--", alpha=0.6, label=f"fit (R²={r2:.3f})")
        ax.set_xlabel("number of requests")
        ax.set_ylabel("total invocation time (ms)")
        ax.set_title("invocation time vs request count")
        ax.legend()
    elif report.experiment == "replica_scaling":
        rows = report.parameters.get("rows", [])
        ax.plot(
            [r["replicas"] for r in rows],
            [r["throughput_rps"] for r in rows],
            marker="o",
        )
        ax.set_xlabel("replicas")
        ax.set_ylabel("throughput (requests/s)")
        ax.set_title("throughput vs replica count")
    else:
        _bars_with_percentiles(ax, report.summary)
        ax.set_title(report.experiment)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_memoization(result: MemoizationResult, path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig, ax = plt.subplots(figsize=(6, 4))
    metrics = ["invocation_ms", "request_ms"]
    x = np.arange(len(metrics))
    width = 0.35
    off = [result.off.summary[m]["median"] for m in metrics]
    on = [result.on.summary[m]["median"] for m in metrics]
    ax.bar(x - width / 2, off, width, label="cache off", color="#dd8452")
    ax.bar(x + width / 2, on, width, label="cache on", color="#4c72b0")
    ax.set_xticks(x)
    ax.set_xticklabels([_METRIC_LABELS[m] for m in metrics])
    ax.set_ylabel("median time (ms)")
    ax.set_title(
        f"memoization: invocation -{result.invocation_reduction_pct:.1f}%, "
        f"request -{result.request_reduction_pct:.1f}%"
    )
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
