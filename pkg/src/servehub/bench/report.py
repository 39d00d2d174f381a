"""Benchmark reports: sample collections, nearest-rank summaries, tables."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Any

from servehub.domain import Timings, ValidationError

__all__ = ["EXPERIMENTS", "nearest_rank", "summarize", "BenchmarkReport"]

EXPERIMENTS = (
    "overhead_decomposition",
    "memoization",
    "batching",
    "replica_scaling",
    "makespan",
)

METRICS = ("inference_ms", "invocation_ms", "request_ms")


def nearest_rank(sorted_values: list[float], percentile: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th order statistic."""
    if not sorted_values:
        raise ValidationError("percentile of an empty sample")
    n = len(sorted_values)
    rank = max(1, math.ceil(percentile / 100.0 * n))
    return sorted_values[min(rank, n) - 1]


def summarize(samples: list[Timings]) -> dict[str, dict[str, float]]:
    """Median and 5th/95th percentile per metric, nearest-rank definitions."""
    summary: dict[str, dict[str, float]] = {}
    for metric in METRICS:
        values = sorted(getattr(t, metric) for t in samples)
        summary[metric] = {
            "median": nearest_rank(values, 50),
            "p5": nearest_rank(values, 5),
            "p95": nearest_rank(values, 95),
        }
    return summary


@dataclass(frozen=True)
class BenchmarkReport:
    """One experiment's samples plus the derived summary."""

    experiment: str
    parameters: dict[str, Any] = field(default_factory=dict)
    samples: tuple[Timings, ...] = ()
    summary: dict[str, dict[str, float]] = field(default_factory=dict)
    makespan_ms: float | None = None

    def __post_init__(self) -> None:
        if self.experiment not in EXPERIMENTS:
            raise ValidationError(f"unknown experiment {self.experiment!r}")

    @classmethod
    def build(
        cls,
        experiment: str,
        samples: list[Timings],
        parameters: dict[str, Any] | None = None,
        makespan_ms: float | None = None,
    ) -> "BenchmarkReport":
        return cls(
            experiment=experiment,
            parameters=dict(parameters or {}),
            samples=tuple(samples),
            summary=summarize(samples) if samples else {},
            makespan_ms=makespan_ms,
        )

    def to_payload(self) -> Any:
        payload: dict[str, Any] = {
            "experiment": self.experiment,
            "parameters": self.parameters,
            "samples": [t.to_payload() for t in self.samples],
            "summary": self.summary,
        }
        if self.makespan_ms is not None:
            payload["makespan_ms"] = self.makespan_ms
        return payload

    @classmethod
    def from_payload(cls, raw: Any) -> "BenchmarkReport":
        return cls(
            experiment=raw["experiment"],
            parameters=raw.get("parameters", {}),
            samples=tuple(Timings.from_payload(t) for t in raw.get("samples", ())),
            summary=raw.get("summary", {}),
            makespan_ms=raw.get("makespan_ms"),
        )

    # -- human and machine renderings ------------------------------------

    def table(self) -> str:
        """Aligned-column text table for the terminal."""
        rows = self._rows()
        if not rows:
            return "(empty report)"
        headers = list(rows[0].keys())
        widths = [
            max(len(h), *(len(_fmt(r[h])) for r in rows)) for h in headers
        ]
        lines = [
            "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
            "  ".join("-" * w for w in widths),
        ]
        for row in rows:
            lines.append("  ".join(_fmt(row[h]).ljust(w) for h, w in zip(headers, widths)))
        return "\n".join(lines)

    def csv_text(self) -> str:
        rows = self._rows()
        buf = io.StringIO()
        if rows:
            writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        return buf.getvalue()

    def _rows(self) -> list[dict[str, Any]]:
        if "rows" in self.parameters:
            return [dict(r) for r in self.parameters["rows"]]
        rows = []
        for metric, stats in self.summary.items():
            rows.append(
                {
                    "metric": metric,
                    "median_ms": stats["median"],
                    "p5_ms": stats["p5"],
                    "p95_ms": stats["p95"],
                }
            )
        if self.makespan_ms is not None:
            rows.append({"metric": "makespan", "median_ms": self.makespan_ms, "p5_ms": "", "p95_ms": ""})
        return rows


def _fmt(value: Any) -> str:
    if isinstance(value, float):
        return f"{value:.3f}"
    return str(value)
