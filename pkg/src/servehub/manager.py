"""Task Manager: the daemon deployed at an execution site.

It dials the Management Service queue port, registers the servables it is
configured to host, stages their packages into a digest-keyed cache, runs
replica sets through the process executor, and serves TASK frames until it
is shut down. Results carry the worker-reported inference time and the
invocation time measured here around the executor call.
"""

from __future__ import annotations

import argparse
import asyncio
import hashlib
import json
import logging
import signal
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
from uuid import UUID, uuid4

import httpx

from servehub.domain import ServableId, ServableRecord, ValidationError
from servehub.executor import (
    DEFAULT_INVOKE_DEADLINE_S,
    ExecutorUnavailable,
    InvokeTimeout,
    ReplicaSet,
    WorkerDied,
    WorkerError,
    WorkerStartupError,
)
from servehub.packages import unpack_archive
from servehub.protocol import Frame, ProtocolError, QueueKind, read_frame, write_frame

__all__ = ["ManagerConfig", "TaskManager", "main"]

log = logging.getLogger(__name__)

RECONNECT_BASE_S = 1.0
RECONNECT_CAP_S = 60.0


@dataclass
class ManagerConfig:
    """Configuration for one Task Manager instance."""

    management_addr: str  # host:port of the queue listener
    http_addr: str  # base URL of the REST API, for package fetches
    servable_cache_dir: Path
    capacity: int
    servables: tuple[ServableId, ...]
    replica_overrides: dict[ServableId, int] = field(default_factory=dict)
    manager_id: UUID | None = None
    heartbeat_s: float = 5.0
    drain_timeout_s: float = 30.0
    invoke_deadline_s: float = DEFAULT_INVOKE_DEADLINE_S
    startup_timeout_s: float = 10.0
    reconnect_base_s: float = RECONNECT_BASE_S

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValidationError("capacity must be positive")
        self.servable_cache_dir = Path(self.servable_cache_dir)

    @classmethod
    def from_payload(cls, raw: Any) -> "ManagerConfig":
        try:
            return cls(
                management_addr=raw["management_addr"],
                http_addr=raw["http_addr"],
                servable_cache_dir=Path(raw["servable_cache_dir"]),
                capacity=int(raw["capacity"]),
                servables=tuple(ServableId.parse(s) for s in raw["servables"]),
                replica_overrides={
                    ServableId.parse(k): int(v)
                    for k, v in raw.get("replica_overrides", {}).items()
                },
                manager_id=UUID(raw["manager_id"]) if raw.get("manager_id") else None,
                heartbeat_s=float(raw.get("heartbeat_s", 5.0)),
                drain_timeout_s=float(raw.get("drain_timeout_s", 30.0)),
                invoke_deadline_s=float(raw.get("invoke_deadline_s", DEFAULT_INVOKE_DEADLINE_S)),
                startup_timeout_s=float(raw.get("startup_timeout_s", 10.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed manager config: {exc}") from exc

    def resolve_manager_id(self) -> UUID:
        """Use the configured id, or generate one and persist it in the cache dir."""
        if self.manager_id is not None:
            return self.manager_id
        self.servable_cache_dir.mkdir(parents=True, exist_ok=True)
        id_file = self.servable_cache_dir / "manager_id"
        if id_file.exists():
            self.manager_id = UUID(id_file.read_text().strip())
        else:
            self.manager_id = uuid4()
            id_file.write_text(str(self.manager_id))
        return self.manager_id


class TaskManager:
    """Runs the register/serve loop until shutdown."""

    def __init__(self, config: ManagerConfig):
        self.config = config
        self.manager_id = config.resolve_manager_id()
        self.replica_sets: dict[ServableId, ReplicaSet] = {}
        self.heartbeat_paused = False  # fault-injection hook for tests
        self._writer: asyncio.StreamWriter | None = None
        self._inflight: set[asyncio.Task] = set()
        self._heartbeat_task: asyncio.Task | None = None
        self._stop = asyncio.Event()
        self._semaphore = asyncio.Semaphore(config.capacity)
        self._deploy_done: asyncio.Event | None = None
        self.in_flight_gauge = 0

    # -- main loop -----------------------------------------------------------

    async def run(self) -> None:
        """Register and serve; reconnects with exponential backoff on drops."""
        backoff = self.config.reconnect_base_s
        while not self._stop.is_set():
            try:
                outcome = await self._serve_connection()
            except (ConnectionError, OSError) as exc:
                log.warning("management service unreachable: %s; retrying in %.1fs", exc, backoff)
                try:
                    await asyncio.wait_for(self._stop.wait(), timeout=backoff)
                except asyncio.TimeoutError:
                    pass
                backoff = min(backoff * 2, RECONNECT_CAP_S)
                continue
            backoff = self.config.reconnect_base_s
            if outcome == "shutdown":
                break
        await self._stop_replicas()

    def request_stop(self) -> None:
        self._stop.set()

    async def shutdown(self) -> None:
        """Drain in-flight tasks, then drop the connection so run() exits."""
        self._stop.set()
        await self._drain()
        if self._writer is not None:
            self._writer.close()

    async def kill(self) -> None:
        """Abrupt death for fault-injection tests: no drain, no SHUTDOWN."""
        self._stop.set()
        if self._writer is not None:
            transport = self._writer.transport
            if transport is not None:
                transport.abort()
        for task in list(self._inflight):
            task.cancel()
        if self._heartbeat_task is not None:
            self._heartbeat_task.cancel()
        await self._stop_replicas(graceful=False)

    async def _stop_replicas(self, graceful: bool = True) -> None:
        sets = list(self.replica_sets.values())
        self.replica_sets.clear()
        for replica_set in sets:
            if graceful:
                await replica_set.stop()
            else:
                for handle in replica_set.handles:
                    if handle.process is not None and handle.process.returncode is None:
                        handle.process.kill()
                await replica_set.stop()

    # -- one connection --------------------------------------------------------

    async def _serve_connection(self) -> str:
        host, port_text = self.config.management_addr.rsplit(":", 1)
        reader, writer = await asyncio.open_connection(host, int(port_text))
        self._writer = writer
        self._deploy_done = asyncio.Event()
        try:
            heartbeat_s, records = await self._register(reader, writer, list(self.config.servables))
            hosted = await self._deploy(records)
            if set(hosted) != set(self.config.servables):
                # tell the service which servables actually came up
                heartbeat_s, _ = await self._register(reader, writer, hosted)
            self._deploy_done.set()
            self._heartbeat_task = asyncio.ensure_future(self._heartbeat_loop(writer, heartbeat_s))
            log.info("manager %s serving %d servables", self.manager_id, len(hosted))
            return await self._frame_loop(reader, writer)
        finally:
            if self._heartbeat_task is not None:
                self._heartbeat_task.cancel()
                self._heartbeat_task = None
            writer.close()
            self._writer = None

    async def _register(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, servables: list[ServableId]
    ) -> tuple[float, dict[str, Any]]:
        body = {
            "manager_id": str(self.manager_id),
            "executors": ["process"],
            "hosted_servables": [s.render() for s in servables],
            "capacity": self.config.capacity,
        }
        frame = Frame.with_payload(QueueKind.REGISTER, body)
        await write_frame(writer, frame)
        ack = await read_frame(reader, QueueKind)
        if ack.kind != QueueKind.REGISTER_ACK or ack.correlation_id != frame.correlation_id:
            raise ProtocolError(f"expected REGISTER_ACK, got {ack.kind.name}")
        payload = ack.payload() or {}
        return float(payload.get("heartbeat_s", self.config.heartbeat_s)), payload.get("servables", {})

    async def _deploy(self, records: dict[str, Any]) -> list[ServableId]:
        """Stage packages and start replica sets; failures exclude the servable."""
        hosted: list[ServableId] = []
        for servable_id in self.config.servables:
            if servable_id in self.replica_sets:
                hosted.append(servable_id)  # already running from a previous connection
                continue
            raw = records.get(servable_id.render())
            if raw is None:
                log.error("servable %s unknown to the management service, excluded", servable_id)
                continue
            record = ServableRecord.from_payload(raw)
            if record.state != "ready":
                log.error("servable %s is %s, excluded", servable_id, record.state)
                continue
            try:
                package_dir = await self._stage_package(record)
            except Exception as exc:
                log.error("package fetch for %s failed: %s; excluded", servable_id, exc)
                continue
            replicas = self.config.replica_overrides.get(servable_id, record.replicas_default)
            replica_set = ReplicaSet(
                record,
                package_dir,
                replicas,
                startup_timeout_s=self.config.startup_timeout_s,
                invoke_deadline_s=self.config.invoke_deadline_s,
            )
            try:
                await replica_set.start()
            except WorkerStartupError as exc:
                log.error("replicas for %s failed to start: %s; excluded", servable_id, exc)
                await replica_set.stop()
                continue
            self.replica_sets[servable_id] = replica_set
            hosted.append(servable_id)
        return hosted

    async def _stage_package(self, record: ServableRecord) -> Path:
        dest = self.config.servable_cache_dir / record.package_digest
        marker = dest / ".complete"
        if marker.exists():
            return dest
        url = f"{self.config.http_addr}/api/packages/{record.package_digest}"
        async with httpx.AsyncClient() as client:
            response = await client.get(url, timeout=60.0)
            response.raise_for_status()
            data = response.content
        if hashlib.sha256(data).hexdigest() != record.package_digest:
            raise ValidationError(f"package digest mismatch for {record.id.render()}")
        unpack_archive(data, dest)
        marker.touch()
        return dest

    async def _heartbeat_loop(self, writer: asyncio.StreamWriter, heartbeat_s: float) -> None:
        while True:
            await asyncio.sleep(heartbeat_s)
            if self.heartbeat_paused:
                continue
            try:
                await write_frame(writer, Frame(QueueKind.HEARTBEAT, uuid4()))
            except (ConnectionError, OSError):
                return

    async def _frame_loop(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> str:
        while True:
            try:
                frame = await read_frame(reader, QueueKind)
            except (asyncio.IncompleteReadError, ConnectionError, OSError):
                for task in list(self._inflight):
                    task.cancel()
                return "reconnect"
            if frame.kind == QueueKind.TASK:
                task = asyncio.ensure_future(self._handle_task(frame, writer))
                self._inflight.add(task)
                task.add_done_callback(self._inflight.discard)
            elif frame.kind == QueueKind.SHUTDOWN:
                await self._drain()
                return "shutdown"
            else:
                log.warning("unexpected frame kind %s", frame.kind.name)

    async def _drain(self) -> None:
        """Let in-flight tasks finish (bounded), so their RESULTs still go out."""
        if not self._inflight:
            return
        done, still_running = await asyncio.wait(
            self._inflight, timeout=self.config.drain_timeout_s
        )
        for task in still_running:
            task.cancel()

    async def _handle_task(self, frame: Frame, writer: asyncio.StreamWriter) -> None:
        async with self._semaphore:
            self.in_flight_gauge += 1
            try:
                body = await self._execute_task(frame.payload())
            finally:
                self.in_flight_gauge -= 1
        try:
            await write_frame(writer, Frame.with_payload(QueueKind.RESULT, body, frame.correlation_id))
        except (ConnectionError, OSError):
            pass  # connection died; the service re-dispatches per the retry rule

    async def _execute_task(self, payload: Any) -> dict[str, Any]:
        task_id = payload.get("task_id", "")
        body: dict[str, Any] = {"task_id": task_id, "inference_ms": 0.0, "invocation_ms": 0.0}
        try:
            servable = ServableId.parse(payload["servable"])
            inputs = payload["inputs"]
        except (KeyError, ValidationError) as exc:
            body.update(status="failed", error={"code": "bad_task", "message": str(exc)})
            return body
        replica_set = self.replica_sets.get(servable)
        if replica_set is None and self._deploy_done is not None and not self._deploy_done.is_set():
            # a task can arrive between registration and replica startup
            try:
                await asyncio.wait_for(
                    self._deploy_done.wait(), timeout=self.config.startup_timeout_s + 30.0
                )
            except asyncio.TimeoutError:
                pass
            replica_set = self.replica_sets.get(servable)
        if replica_set is None:
            body.update(
                status="failed",
                error={"code": "not_hosted", "message": f"{servable.render()} is not hosted here"},
            )
            return body

        started = time.perf_counter()
        try:
            outputs, inference_ms, replica = await replica_set.invoke_balanced(list(inputs))
        except WorkerError as exc:
            return self._task_failure(body, task_id, servable, started, "worker_error", exc)
        except InvokeTimeout as exc:
            return self._task_failure(body, task_id, servable, started, "timeout", exc)
        except (ExecutorUnavailable, WorkerDied, ProtocolError) as exc:
            return self._task_failure(body, task_id, servable, started, "executor_unavailable", exc)
        invocation_ms = (time.perf_counter() - started) * 1000.0
        log.info(
            "task=%s servable=%s replica=%d invocation_ms=%.3f",
            task_id, servable.render(), replica, invocation_ms,
        )
        body.update(
            status="succeeded",
            outputs=list(outputs),
            inference_ms=inference_ms,
            invocation_ms=invocation_ms,
        )
        return body

    def _task_failure(
        self, body: dict[str, Any], task_id: str, servable: ServableId,
        started: float, code: str, exc: Exception,
    ) -> dict[str, Any]:
        invocation_ms = (time.perf_counter() - started) * 1000.0
        log.info(
            "task=%s servable=%s failed=%s invocation_ms=%.3f",
            task_id, servable.render(), code, invocation_ms,
        )
        body["invocation_ms"] = invocation_ms
        body.update(status="failed", error={"code": code, "message": str(exc)})
        return body


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="servehub-manager", description="Run a servehub Task Manager")
    parser.add_argument("--config", required=True, help="path to a manager config JSON file")
    parser.add_argument("--log-level", default="INFO")
    args = parser.parse_args(argv)

    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, args.log_level.upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    config = ManagerConfig.from_payload(json.loads(Path(args.config).read_text()))
    manager = TaskManager(config)

    async def _run() -> None:
        loop = asyncio.get_running_loop()
        for sig in (signal.SIGINT, signal.SIGTERM):
            loop.add_signal_handler(sig, lambda: asyncio.ensure_future(manager.shutdown()))
        await manager.run()

    asyncio.run(_run())


if __name__ == "__main__":
    main()
