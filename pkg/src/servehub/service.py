"""Management service core: task submission, memoization, batching, pipelines.

This is the user-facing orchestrator. It validates requests against the
published schemas, answers repeated inputs from an LRU cache keyed by the
canonical input encoding, optionally coalesces concurrent single requests
into worker batches, threads pipeline values server-side, and measures
``request_ms`` around every task from receipt to result assembly.
"""

from __future__ import annotations

import asyncio
import hashlib
import logging
import os
import re
import tempfile
import time
from collections import OrderedDict
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any
from uuid import UUID, uuid4

from servehub.broker import Broker, ManagerLost, NoCapacity
from servehub.domain import (
    CanonicalizationError,
    NotFound,
    ServableId,
    ServableMetadata,
    ServableRecord,
    TaskError,
    TaskRequest,
    TaskResult,
    Timings,
    ValidationError,
    Visibility,
    accepts,
    canonical_json,
    parse_canonical,
    validate,
)
from servehub.repository import Repository

__all__ = ["BatchPolicy", "PipelineSpec", "ManagementService", "CACHE_CAPACITY_DEFAULT"]

log = logging.getLogger(__name__)

CACHE_CAPACITY_DEFAULT = 10_000
RESULT_TTL_DEFAULT_S = 3600.0
_VERSION_FILE_RE = re.compile(r"^v([1-9][0-9]*)\.json$")

BATCH_MODES = ("off", "client-batch-only", "coalesce")


@dataclass(frozen=True)
class BatchPolicy:
    """How single requests are grouped into worker batches.

    ``off`` and ``client-batch-only`` both pass requests through untouched
    (client-supplied batches are always dispatched as one task); ``coalesce``
    additionally merges single requests that arrive within ``window_ms``.
    """

    mode: str = "client-batch-only"
    window_ms: float = 5.0
    max_batch: int = 64

    def __post_init__(self) -> None:
        if self.mode not in BATCH_MODES:
            raise ValidationError(f"unknown batch mode {self.mode!r}")
        if self.max_batch < 1:
            raise ValidationError("max_batch must be positive")


@dataclass(frozen=True)
class PipelineSpec:
    """An ordered chain of servables executed server-side."""

    pipeline_id: ServableId
    steps: tuple[ServableId, ...]
    metadata: ServableMetadata

    def __post_init__(self) -> None:
        if not self.steps:
            raise ValidationError("a pipeline requires at least one step")

    def to_payload(self) -> Any:
        return {
            "pipeline_id": self.pipeline_id.render(),
            "steps": [s.render() for s in self.steps],
            "metadata": self.metadata.to_payload(),
        }

    @classmethod
    def from_payload(cls, raw: Any) -> "PipelineSpec":
        return cls(
            pipeline_id=ServableId.parse(raw["pipeline_id"]),
            steps=tuple(ServableId.parse(s) for s in raw["steps"]),
            metadata=ServableMetadata.from_payload(raw["metadata"]),
        )


class MemoCache:
    """Bounded LRU mapping cache keys to recorded outputs."""

    def __init__(self, capacity: int = CACHE_CAPACITY_DEFAULT):
        self.capacity = capacity
        self._entries: OrderedDict[str, Any] = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, key: str) -> tuple[bool, Any]:
        if key in self._entries:
            self._entries.move_to_end(key)
            self.hits += 1
            return True, self._entries[key]
        self.misses += 1
        return False, None

    def put(self, key: str, value: Any) -> None:
        self._entries[key] = value
        self._entries.move_to_end(key)
        while len(self._entries) > self.capacity:
            self._entries.popitem(last=False)

    def __len__(self) -> int:
        return len(self._entries)


class _StoredTask:
    __slots__ = ("requester", "result", "finished_at")

    def __init__(self, requester: str, result: TaskResult):
        self.requester = requester
        self.result = result
        self.finished_at: float | None = None


class TaskStore:
    """Task snapshots; finished results are retained for a bounded TTL."""

    def __init__(self, ttl_s: float = RESULT_TTL_DEFAULT_S):
        self.ttl_s = ttl_s
        self._tasks: dict[UUID, _StoredTask] = {}

    def create(self, task_id: UUID, requester: str) -> None:
        self._tasks[task_id] = _StoredTask(requester, TaskResult(task_id, "pending"))

    def update(self, task_id: UUID, result: TaskResult) -> None:
        stored = self._tasks.get(task_id)
        if stored is None:
            return
        stored.result = result
        if result.status in ("succeeded", "failed"):
            stored.finished_at = time.monotonic()

    def get(self, task_id: UUID, requester: str) -> TaskResult:
        self._purge()
        stored = self._tasks.get(task_id)
        if stored is None or stored.requester != requester:
            raise NotFound(f"task {task_id} not found")
        return stored.result

    def counts(self) -> dict[str, int]:
        self._purge()
        counts = {"pending": 0, "running": 0}
        for stored in self._tasks.values():
            if stored.result.status in counts:
                counts[stored.result.status] += 1
        return counts

    def _purge(self) -> None:
        cutoff = time.monotonic() - self.ttl_s
        expired = [
            tid
            for tid, stored in self._tasks.items()
            if stored.finished_at is not None and stored.finished_at < cutoff
        ]
        for tid in expired:
            del self._tasks[tid]


class _BatchFailed(Exception):
    """Internal: a dispatched batch failed; all members share the error."""

    def __init__(self, error: TaskError, invocation_ms: float):
        super().__init__(error.message)
        self.error = error
        self.invocation_ms = invocation_ms


class _CoalesceBuffer:
    __slots__ = ("record", "items", "timer")

    def __init__(self, record: ServableRecord):
        self.record = record
        self.items: list[tuple[Any, asyncio.Future]] = []
        self.timer: asyncio.Task | None = None


class ManagementService:
    """Orchestrates the repository, the task queue, and the optimizations."""

    def __init__(
        self,
        repository: Repository,
        state_dir: Path | str,
        tokens: dict[str, str] | None = None,
        queue_host: str = "127.0.0.1",
        queue_port: int = 0,
        cache_enabled: bool = True,
        cache_capacity: int = CACHE_CAPACITY_DEFAULT,
        batch_policy: BatchPolicy = BatchPolicy(),
        result_ttl_s: float = RESULT_TTL_DEFAULT_S,
        heartbeat_s: float = 5.0,
        dispatch_timeout_s: float = 30.0,
    ):
        self.repository = repository
        self.state_dir = Path(state_dir)
        self.tokens = dict(tokens or {})
        self.cache_enabled = cache_enabled
        self.batch_policy = batch_policy
        self.cache = MemoCache(cache_capacity)
        self.tasks = TaskStore(result_ttl_s)
        self.broker = Broker(
            self._resolve_for_manager,
            host=queue_host,
            port=queue_port,
            heartbeat_s=heartbeat_s,
            dispatch_timeout_s=dispatch_timeout_s,
        )
        self._pipelines: dict[ServableId, PipelineSpec] = {}
        self._pipeline_dir = self.state_dir / "pipelines"
        self._coalesce_buffers: dict[ServableId, _CoalesceBuffer] = {}
        self._background: list[asyncio.Task] = []
        self._load_pipelines()

    # -- lifecycle ------------------------------------------------------------

    async def start(self) -> None:
        await self.broker.start()

    async def stop(self) -> None:
        for task in self._background:
            task.cancel()
        await self.broker.stop()

    @property
    def queue_port(self) -> int:
        return self.broker.port

    def authenticate(self, token: str) -> str | None:
        return self.tokens.get(token)

    async def _resolve_for_manager(self, ids: list[ServableId]) -> dict[str, Any]:
        """Registration-time record lookup; managers are trusted infrastructure."""
        resolved: dict[str, Any] = {}
        for servable_id in ids:
            record = self.repository.resolve(servable_id)
            resolved[servable_id.render()] = record.to_payload() if record else None
        return resolved

    # -- task submission --------------------------------------------------------

    def _ready_record(self, servable: ServableId, requester: str) -> ServableRecord:
        record = self.repository.get(servable, requester)
        if record.state != "ready":
            raise ValidationError(
                f"servable {servable.render()} is {record.state}, not ready"
            )
        return record

    @staticmethod
    def _cache_key(servable: ServableId, payload: Any) -> str:
        raw = servable.render().encode("utf-8") + canonical_json(payload)
        return hashlib.sha256(raw).hexdigest()

    def _validated_keys(self, record: ServableRecord, inputs: list[Any]) -> list[str]:
        if not inputs:
            raise ValidationError("inputs must contain at least one element")
        schema = record.metadata.input_schema
        for i, value in enumerate(inputs):
            report = validate(value, schema)
            if not report:
                raise ValidationError(
                    f"inputs[{i}].{report.path}: {report.message}"
                    if report.path != "$"
                    else f"inputs[{i}]: {report.message}"
                )
        try:
            return [self._cache_key(record.id, value) for value in inputs]
        except CanonicalizationError as exc:
            raise ValidationError(str(exc)) from exc

    async def submit(
        self,
        servable: ServableId,
        inputs: list[Any],
        async_mode: bool = False,
        requester: str = "",
        cache: bool | None = None,
    ) -> TaskResult | UUID:
        """Run a servable on a batch of inputs.

        Synchronous mode blocks until the TaskResult; asynchronous mode
        returns the task id immediately and the result becomes pollable.
        Cached input elements never reach a worker; only the misses are
        dispatched, as a single batch, and outputs keep the input order.
        """
        received = time.perf_counter()
        record = self._ready_record(servable, requester)
        keys = self._validated_keys(record, inputs)
        task_id = uuid4()
        request = TaskRequest(
            task_id=task_id,
            servable=record.id,
            inputs=tuple(inputs),
            async_mode=async_mode,
            requester=requester,
            submitted_wall=time.time(),
            submitted_mono=received,
        )
        self.tasks.create(task_id, requester)
        if async_mode:
            task = asyncio.ensure_future(self._run_stored(record, request, keys, cache))
            self._background.append(task)
            task.add_done_callback(self._background.remove)
            return task_id
        result = await self._run(record, request, keys, cache)
        self.tasks.update(task_id, result)
        return result

    async def _run_stored(
        self, record: ServableRecord, request: TaskRequest, keys: list[str], cache: bool | None
    ) -> None:
        try:
            result = await self._run(record, request, keys, cache)
        except NoCapacity as exc:
            result = self._failed(request, "no_capacity", str(exc))
        except Exception as exc:  # pragma: no cover - defensive
            log.exception("task %s crashed", request.task_id)
            result = self._failed(request, "internal", str(exc))
        self.tasks.update(request.task_id, result)

    def _failed(self, request: TaskRequest, code: str, message: str, invocation_ms: float = 0.0) -> TaskResult:
        request_ms = (time.perf_counter() - request.submitted_mono) * 1000.0
        return TaskResult(
            task_id=request.task_id,
            status="failed",
            error=TaskError(code, message),
            timings=Timings(0.0, invocation_ms, request_ms),
        )

    async def _run(
        self, record: ServableRecord, request: TaskRequest, keys: list[str], cache: bool | None
    ) -> TaskResult:
        cache_on = self.cache_enabled if cache is None else cache
        inputs = list(request.inputs)
        hits: dict[int, Any] = {}
        if cache_on:
            for i, key in enumerate(keys):
                found, value = self.cache.get(key)
                if found:
                    hits[i] = value
        miss_indices = [i for i in range(len(inputs)) if i not in hits]

        if not miss_indices:
            request_ms = (time.perf_counter() - request.submitted_mono) * 1000.0
            outputs = tuple(hits[i] for i in range(len(inputs)))
            return TaskResult(
                task_id=request.task_id,
                status="succeeded",
                outputs=outputs,
                timings=Timings(0.0, 0.0, request_ms),
                cache_hit=True,
            )

        self.tasks.update(request.task_id, TaskResult(request.task_id, "running"))
        miss_inputs = [inputs[i] for i in miss_indices]
        try:
            if self.batch_policy.mode == "coalesce" and len(miss_inputs) == 1:
                outputs_miss, inference_ms, invocation_ms = await self._coalesce_one(
                    record, miss_inputs[0]
                )
            else:
                outputs_miss, inference_ms, invocation_ms = await self._dispatch(
                    record, miss_inputs
                )
        except _BatchFailed as exc:
            return self._failed(request, exc.error.code, exc.error.message, exc.invocation_ms)
        except ManagerLost as exc:
            return self._failed(request, "manager_lost", str(exc))

        if cache_on:
            for i, output in zip(miss_indices, outputs_miss):
                self.cache.put(keys[i], output)

        merged: list[Any] = list(inputs)
        for i, output in zip(miss_indices, outputs_miss):
            merged[i] = output
        for i, output in hits.items():
            merged[i] = output
        request_ms = (time.perf_counter() - request.submitted_mono) * 1000.0
        return TaskResult(
            task_id=request.task_id,
            status="succeeded",
            outputs=tuple(merged),
            timings=Timings(inference_ms, invocation_ms, request_ms),
            cache_hit=False,
        )

    async def _dispatch(
        self, record: ServableRecord, inputs: list[Any]
    ) -> tuple[list[Any], float, float]:
        """Send one batch through the queue; returns (outputs, inference, invocation)."""
        dispatch_request = TaskRequest(
            task_id=uuid4(),
            servable=record.id,
            inputs=tuple(inputs),
            submitted_wall=time.time(),
            submitted_mono=time.perf_counter(),
        )
        body = await self.broker.dispatch(dispatch_request)
        invocation_ms = float(body.get("invocation_ms", 0.0))
        inference_ms = float(body.get("inference_ms", 0.0))
        if body.get("status") != "succeeded":
            error = body.get("error") or {"code": "unknown", "message": "task failed"}
            raise _BatchFailed(TaskError(error["code"], error["message"]), invocation_ms)
        outputs = body.get("outputs")
        if not isinstance(outputs, list) or len(outputs) != len(inputs):
            raise _BatchFailed(
                TaskError("bad_result", "manager returned a malformed output list"),
                invocation_ms,
            )
        return outputs, inference_ms, invocation_ms

    # -- coalescing ---------------------------------------------------------------

    async def _coalesce_one(self, record: ServableRecord, value: Any) -> tuple[list[Any], float, float]:
        future: asyncio.Future = asyncio.get_running_loop().create_future()
        buffer = self._coalesce_buffers.get(record.id)
        if buffer is None:
            buffer = _CoalesceBuffer(record)
            self._coalesce_buffers[record.id] = buffer
            buffer.timer = asyncio.ensure_future(self._flush_after_window(record.id))
        buffer.items.append((value, future))
        if len(buffer.items) >= self.batch_policy.max_batch:
            self._flush_now(record.id, cancel_timer=True)
        output, inference_ms, invocation_ms = await future
        return [output], inference_ms, invocation_ms

    async def _flush_after_window(self, servable: ServableId) -> None:
        await asyncio.sleep(self.batch_policy.window_ms / 1000.0)
        self._flush_now(servable, cancel_timer=False)

    def _flush_now(self, servable: ServableId, cancel_timer: bool) -> None:
        buffer = self._coalesce_buffers.pop(servable, None)
        if buffer is None:
            return
        if cancel_timer and buffer.timer is not None:
            buffer.timer.cancel()
        asyncio.ensure_future(self._flush(buffer))

    async def _flush(self, buffer: _CoalesceBuffer) -> None:
        inputs = [value for value, _ in buffer.items]
        futures = [future for _, future in buffer.items]
        try:
            outputs, inference_ms, invocation_ms = await self._dispatch(buffer.record, inputs)
        except BaseException as exc:  # a failed batch fails every member alike
            for future in futures:
                if not future.done():
                    future.set_exception(exc)
            return
        for output, future in zip(outputs, futures):
            if not future.done():
                future.set_result((output, inference_ms, invocation_ms))

    # -- task status ----------------------------------------------------------------

    def task_status(self, task_id: UUID, requester: str) -> TaskResult:
        return self.tasks.get(task_id, requester)

    # -- pipelines --------------------------------------------------------------------

    def _load_pipelines(self) -> None:
        self._pipeline_dir.mkdir(parents=True, exist_ok=True)
        for path in sorted(self._pipeline_dir.glob("*/*/v*.json")):
            try:
                spec = PipelineSpec.from_payload(parse_canonical(path.read_bytes()))
            except (ValidationError, ValueError, KeyError):
                continue
            self._pipelines[spec.pipeline_id] = spec

    def publish_pipeline(self, manifest: Any, owner: str) -> PipelineSpec:
        """Validate step compatibility and store a new pipeline version.

        Consecutive steps must have compatible schemas: each step's output
        type must be accepted by the next step's input type.
        """
        try:
            namespace = manifest["namespace"]
            name = manifest["name"]
            step_ids = [ServableId.parse(s) for s in manifest["steps"]]
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed pipeline manifest: {exc}") from exc
        if not step_ids:
            raise ValidationError("a pipeline requires at least one step")
        if namespace != owner:
            raise ValidationError(f"user {owner!r} may not publish into namespace {namespace!r}")

        records = [self._ready_record(sid, owner) for sid in step_ids]
        for i in range(len(records) - 1):
            out_schema = records[i].metadata.output_schema
            in_schema = records[i + 1].metadata.input_schema
            if not accepts(out_schema, in_schema):
                raise ValidationError(
                    f"step {i} output type is not accepted by step {i + 1} input type"
                )

        version = self._next_pipeline_version(namespace, name)
        pipeline_id = ServableId(namespace, name, version)
        metadata = ServableMetadata(
            id=pipeline_id,
            title=manifest.get("title", name),
            description=manifest.get("description", ""),
            authors=tuple(manifest.get("authors", (owner,))),
            created=datetime.now(tz=timezone.utc),
            model_type="pipeline",
            input_schema=records[0].metadata.input_schema,
            output_schema=records[-1].metadata.output_schema,
            tags=tuple(manifest.get("tags", ())),
            visibility=Visibility.from_payload(manifest.get("visibility", {"kind": "public"})),
        )
        spec = PipelineSpec(pipeline_id, tuple(step_ids), metadata)
        self._write_pipeline(spec)
        self._pipelines[pipeline_id] = spec
        return spec

    def _next_pipeline_version(self, namespace: str, name: str) -> int:
        highest = 0
        name_dir = self._pipeline_dir / namespace / name
        if name_dir.is_dir():
            for entry in name_dir.iterdir():
                m = _VERSION_FILE_RE.match(entry.name)
                if m:
                    highest = max(highest, int(m.group(1)))
        return highest + 1

    def _write_pipeline(self, spec: PipelineSpec) -> None:
        target = (
            self._pipeline_dir
            / spec.pipeline_id.namespace
            / spec.pipeline_id.name
            / f"v{spec.pipeline_id.version}.json"
        )
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(dir=target.parent, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(canonical_json(spec.to_payload()))
        os.replace(tmp_name, target)

    def get_pipeline(self, pipeline_id: ServableId, requester: str) -> PipelineSpec:
        spec = self._pipelines.get(pipeline_id)
        if spec is None or not spec.metadata.visibility.allows(requester, pipeline_id.namespace):
            raise NotFound(f"pipeline {pipeline_id.render()} not found")
        return spec

    async def run_pipeline(self, pipeline_id: ServableId, value: Any, requester: str) -> TaskResult:
        """Execute the steps sequentially, threading each output to the next input."""
        received = time.perf_counter()
        spec = self.get_pipeline(pipeline_id, requester)
        first = self.repository.resolve(spec.steps[0])
        if first is None:
            raise NotFound(f"pipeline step {spec.steps[0].render()} is gone")
        report = validate(value, first.metadata.input_schema)
        if not report:
            raise ValidationError(f"input.{report.path}: {report.message}")

        task_id = uuid4()
        step_timings: list[Timings] = []
        all_cached = True
        current = value
        for index, step_id in enumerate(spec.steps):
            record = self.repository.resolve(step_id)
            if record is None or record.state != "ready":
                return self._pipeline_failure(
                    task_id, received, step_timings,
                    index, f"step {index} servable {step_id.render()} is unavailable",
                )
            request = TaskRequest(
                task_id=uuid4(),
                servable=step_id,
                inputs=(current,),
                requester=requester,
                submitted_wall=time.time(),
                submitted_mono=time.perf_counter(),
            )
            keys = [self._cache_key(step_id, current)]
            try:
                result = await self._run(record, request, keys, None)
            except NoCapacity as exc:
                return self._pipeline_failure(
                    task_id, received, step_timings, index, f"step {index}: {exc}"
                )
            step_timings.append(result.timings)
            if result.status != "succeeded":
                assert result.error is not None
                return self._pipeline_failure(
                    task_id, received, step_timings,
                    index, f"step {index}: {result.error.message}", result.error.code,
                )
            all_cached = all_cached and result.cache_hit
            assert result.outputs is not None
            current = result.outputs[0]

        request_ms = (time.perf_counter() - received) * 1000.0
        return TaskResult(
            task_id=task_id,
            status="succeeded",
            outputs=(current,),
            timings=Timings(
                sum(t.inference_ms for t in step_timings),
                sum(t.invocation_ms for t in step_timings),
                request_ms,
            ),
            cache_hit=all_cached,
            step_timings=tuple(step_timings),
        )

    def _pipeline_failure(
        self,
        task_id: UUID,
        received: float,
        step_timings: list[Timings],
        step_index: int,
        message: str,
        code: str = "step_failed",
    ) -> TaskResult:
        request_ms = (time.perf_counter() - received) * 1000.0
        return TaskResult(
            task_id=task_id,
            status="failed",
            error=TaskError(code, message),
            timings=Timings(
                sum(t.inference_ms for t in step_timings),
                sum(t.invocation_ms for t in step_timings),
                request_ms,
            ),
            step_timings=tuple(step_timings),
        )

    # -- introspection ------------------------------------------------------------------

    def status(self) -> dict[str, Any]:
        return {
            "managers": self.broker.manager_status(),
            "cache": {"entries": len(self.cache), "hits": self.cache.hits, "misses": self.cache.misses},
            "tasks": self.tasks.counts(),
            "batch_policy": {
                "mode": self.batch_policy.mode,
                "window_ms": self.batch_policy.window_ms,
                "max_batch": self.batch_policy.max_batch,
            },
            "cache_enabled": self.cache_enabled,
        }
