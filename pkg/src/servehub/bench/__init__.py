"""Benchmark harness: timing experiments, reports, tables, and figures."""

from servehub.bench.report import BenchmarkReport, nearest_rank, summarize
from servehub.bench.harness import (
    BenchClient,
    ExperimentAborted,
    MemoizationResult,
    SelfHostedBench,
    linear_fit,
    run_batching,
    run_memoization,
    run_overhead_decomposition,
    run_replica_scaling,
)

__all__ = [
    "BenchmarkReport",
    "nearest_rank",
    "summarize",
    "BenchClient",
    "ExperimentAborted",
    "MemoizationResult",
    "SelfHostedBench",
    "linear_fit",
    "run_batching",
    "run_memoization",
    "run_overhead_decomposition",
    "run_replica_scaling",
]
