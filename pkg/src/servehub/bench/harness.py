"""Experiment runners that drive a deployment over its REST API.

The latency experiments submit sequentially, waiting for each response
before the next request; the scaling experiment submits concurrently from
a client-side pool. Caching is controlled per request so paired cache
on/off runs hit the same deployment.
"""

from __future__ import annotations

import concurrent.futures
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import httpx
import numpy as np

from servehub.domain import ServableId, Timings
from servehub.bench.report import BenchmarkReport
from servehub.stack import ThreadedStack

__all__ = [
    "BenchClient",
    "ExperimentAborted",
    "MemoizationResult",
    "SelfHostedBench",
    "linear_fit",
    "run_overhead_decomposition",
    "run_memoization",
    "run_batching",
    "run_replica_scaling",
]


class ExperimentAborted(Exception):
    """A request failed mid-experiment; carries the partial report."""

    def __init__(self, detail: str, partial: BenchmarkReport):
        super().__init__(detail)
        self.partial = partial


class BenchClient:
    """Thin REST client used by every experiment."""

    def __init__(self, base_url: str, token: str, timeout_s: float = 600.0):
        self._client = httpx.Client(
            base_url=base_url,
            headers={"Authorization": f"Bearer {token}"},
            timeout=timeout_s,
        )

    def close(self) -> None:
        self._client.close()

    def run(self, servable: ServableId, inputs: list[Any], cache: bool | None = None) -> dict[str, Any]:
        body: dict[str, Any] = {"inputs": inputs}
        if cache is not None:
            body["cache"] = cache
        url = f"/api/servables/{servable.namespace}/{servable.name}/{servable.version}/run"
        response = self._client.post(url, json=body)
        if response.status_code != 200:
            raise RuntimeError(f"run failed with HTTP {response.status_code}: {response.text[:300]}")
        payload = response.json()
        if payload["status"] != "succeeded":
            raise RuntimeError(f"task failed: {payload.get('error')}")
        return payload

    def timings(self, payload: dict[str, Any]) -> Timings:
        return Timings.from_payload(payload["timings"])


def _sequential_samples(
    client: BenchClient,
    servable: ServableId,
    n: int,
    input_value: Any,
    cache: bool | None,
    experiment: str,
    parameters: dict[str, Any],
) -> list[Timings]:
    samples: list[Timings] = []
    for i in range(n):
        try:
            payload = client.run(servable, [input_value], cache=cache)
        except RuntimeError as exc:
            partial = BenchmarkReport.build(experiment, samples, {**parameters, "failed_at": i})
            raise ExperimentAborted(str(exc), partial) from exc
        samples.append(client.timings(payload))
    return samples


def run_overhead_decomposition(
    client: BenchClient,
    servable: ServableId,
    n_requests: int = 100,
    input_value: Any = None,
) -> BenchmarkReport:
    """Sequential fixed-input submits; distributions of the three metrics.

    Caching is bypassed so every request crosses the full stack.
    """
    parameters = {"servable": servable.render(), "n_requests": n_requests}
    samples = _sequential_samples(
        client, servable, n_requests, input_value, False, "overhead_decomposition", parameters
    )
    return BenchmarkReport.build("overhead_decomposition", samples, parameters)


@dataclass(frozen=True)
class MemoizationResult:
    """Paired cache-off / cache-on reports plus median reductions."""

    off: BenchmarkReport
    on: BenchmarkReport
    invocation_reduction_pct: float
    request_reduction_pct: float

    def to_payload(self) -> Any:
        return {
            "off": self.off.to_payload(),
            "on": self.on.to_payload(),
            "invocation_reduction_pct": self.invocation_reduction_pct,
            "request_reduction_pct": self.request_reduction_pct,
        }

    def table(self) -> str:
        rows = []
        for metric in ("invocation_ms", "request_ms"):
            off = self.off.summary[metric]["median"]
            on = self.on.summary[metric]["median"]
            reduction = 100.0 * (off - on) / off if off > 0 else 0.0
            rows.append(f"{metric:<14} off={off:>10.3f}  on={on:>10.3f}  reduction={reduction:6.1f}%")
        return "\n".join(rows)


def run_memoization(
    client: BenchClient,
    servable: ServableId,
    n: int = 100,
    input_value: Any = None,
) -> MemoizationResult:
    """Same fixed input n times with caching off, then on (after one warm-up)."""
    parameters = {"servable": servable.render(), "n": n}
    off_samples = _sequential_samples(
        client, servable, n, input_value, False, "memoization", {**parameters, "cache": "off"}
    )
    client.run(servable, [input_value], cache=True)  # prime the cache
    on_samples = _sequential_samples(
        client, servable, n, input_value, True, "memoization", {**parameters, "cache": "on"}
    )
    off = BenchmarkReport.build("memoization", off_samples, {**parameters, "cache": "off"})
    on = BenchmarkReport.build("memoization", on_samples, {**parameters, "cache": "on"})

    def reduction(metric: str) -> float:
        baseline = off.summary[metric]["median"]
        if baseline <= 0:
            return 0.0
        return 100.0 * (baseline - on.summary[metric]["median"]) / baseline

    return MemoizationResult(off, on, reduction("invocation_ms"), reduction("request_ms"))


def run_batching(
    client: BenchClient,
    servable: ServableId,
    sizes: list[int],
    input_value: Any = None,
    modes: tuple[str, ...] = ("batched", "unbatched"),
) -> BenchmarkReport:
    """Total invocation time per request count, batched vs unbatched.

    For each size s, unbatched issues s sequential single submits and sums
    their invocation times; batched issues one submit carrying s inputs.
    """
    rows: list[dict[str, Any]] = []
    samples: list[Timings] = []
    for size in sizes:
        row: dict[str, Any] = {"size": size}
        if "unbatched" in modes:
            seq = _sequential_samples(
                client, servable, size, input_value, False, "batching",
                {"servable": servable.render(), "size": size},
            )
            samples.extend(seq)
            row["unbatched_total_invocation_ms"] = sum(t.invocation_ms for t in seq)
        if "batched" in modes:
            payload = client.run(servable, [input_value] * size, cache=False)
            timing = client.timings(payload)
            samples.append(timing)
            row["batched_total_invocation_ms"] = timing.invocation_ms
        rows.append(row)
    parameters = {"servable": servable.render(), "sizes": list(sizes), "rows": rows, "modes": list(modes)}
    return BenchmarkReport.build("batching", samples, parameters)


def linear_fit(xs: list[float], ys: list[float]) -> tuple[float, float, float]:
    """Least-squares line through (xs, ys): slope, intercept, and R^2."""
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    slope, intercept = np.polyfit(x, y, 1)
    predicted = slope * x + intercept
    ss_res = float(np.sum((y - predicted) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return float(slope), float(intercept), r2


class SelfHostedBench:
    """Boots a stack, publishes a synthetic servable, and manages replicas."""

    OWNER = "bench"
    TOKEN = "bench-token"

    def __init__(
        self,
        workdir: Path | str,
        servable_spec: str,
        replicas: int = 1,
        capacity: int | None = None,
        cache_enabled: bool = True,
    ):
        self.spec = servable_spec
        self.stack = ThreadedStack(
            workdir, tokens={self.TOKEN: self.OWNER}, cache_enabled=cache_enabled
        )
        name = servable_spec.replace(":", "-").replace(".", "-")
        record = self.stack.publish_worker(self.OWNER, name, servable_spec)
        self.servable = record.id
        self.replicas = 0
        self.deploy(replicas, capacity)

    def deploy(self, replicas: int, capacity: int | None = None) -> None:
        """(Re)start the manager with the requested replica count."""
        if self.replicas == replicas:
            return
        self.stack.remove_managers()
        self.stack.add_manager(
            [self.servable],
            capacity=capacity or max(4, 2 * replicas),
            replica_overrides={self.servable: replicas},
        )
        self.replicas = replicas

    def client(self) -> BenchClient:
        return BenchClient(self.stack.base_url, self.TOKEN)

    def close(self) -> None:
        self.stack.close()

    def __enter__(self) -> "SelfHostedBench":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()


def run_replica_scaling(
    bench: SelfHostedBench,
    replicas: list[int],
    n: int = 500,
    input_value: Any = None,
) -> BenchmarkReport:
    """Makespan and throughput of n concurrent submits per replica count.

    Client-side concurrency is twice the replica count, so replicas stay
    saturated without unbounded queueing.
    """
    rows: list[dict[str, Any]] = []
    samples: list[Timings] = []
    last_makespan = None
    for count in replicas:
        bench.deploy(count)
        client = bench.client()
        try:
            concurrency = 2 * count
            started = time.perf_counter()
            with concurrent.futures.ThreadPoolExecutor(max_workers=concurrency) as pool:
                payloads = list(
                    pool.map(
                        lambda _: client.run(bench.servable, [input_value], cache=False),
                        range(n),
                    )
                )
            makespan_ms = (time.perf_counter() - started) * 1000.0
        finally:
            client.close()
        for payload in payloads:
            samples.append(Timings.from_payload(payload["timings"]))
        throughput = n / (makespan_ms / 1000.0)
        rows.append(
            {
                "replicas": count,
                "n": n,
                "concurrency": concurrency,
                "makespan_ms": makespan_ms,
                "throughput_rps": throughput,
            }
        )
        last_makespan = makespan_ms
    parameters = {
        "servable": bench.servable.render(),
        "replicas": list(replicas),
        "n": n,
        "rows": rows,
    }
    return BenchmarkReport.build("replica_scaling", samples, parameters, makespan_ms=last_makespan)
