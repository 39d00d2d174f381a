"""Supervised local worker processes and the invocation path to them.

Each replica is one subprocess started from the servable's entrypoint. The
executor listens on a per-replica unix socket, passes its path to the
worker via ``SERVEHUB_SOCKET``, and considers the worker ready only after
it connects and answers a PING. Workers hold one in-flight invocation at a
time; parallelism comes from running several replicas.
"""

from __future__ import annotations

import asyncio
import itertools
import os
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any
from uuid import uuid4

from servehub.domain import ServableRecord, ServeHubError
from servehub.protocol import Frame, ProtocolError, WorkerKind, read_frame, write_frame

__all__ = [
    "ExecutorError",
    "WorkerStartupError",
    "WorkerDied",
    "WorkerError",
    "InvokeTimeout",
    "ExecutorUnavailable",
    "WorkerHandle",
    "ReplicaSet",
    "DEFAULT_STARTUP_TIMEOUT_S",
    "DEFAULT_INVOKE_DEADLINE_S",
]

DEFAULT_STARTUP_TIMEOUT_S = 10.0
DEFAULT_INVOKE_DEADLINE_S = 300.0
_STDERR_TAIL_BYTES = 4096


class ExecutorError(ServeHubError):
    """Base class for executor failures."""


class WorkerStartupError(ExecutorError):
    """Worker exited or failed to answer PING within the startup timeout."""


class WorkerDied(ExecutorError):
    """Worker connection broke mid-invocation."""


class WorkerError(ExecutorError):
    """Worker reported an application error for this invocation."""


class InvokeTimeout(ExecutorError):
    """Invocation exceeded its deadline; the worker was killed and restarted."""


class ExecutorUnavailable(ExecutorError):
    """No replica could be brought up to take the task."""


class WorkerHandle:
    """One replica process plus its socket connection and bookkeeping."""

    def __init__(self, replica_index: int):
        self.replica_index = replica_index
        self.process: asyncio.subprocess.Process | None = None
        self.reader: asyncio.StreamReader | None = None
        self.writer: asyncio.StreamWriter | None = None
        self.state = "starting"  # starting | ready | busy | dead
        self.started_at = 0.0
        self.assigned = 0  # tasks routed here and not yet finished
        self.invocations = 0
        self.diagnostic = ""
        self.lock = asyncio.Lock()  # workers take one invocation at a time
        self._stderr_tail = bytearray()
        self._monitor: asyncio.Task | None = None

    @property
    def pid(self) -> int | None:
        return self.process.pid if self.process else None

    def stderr_tail(self) -> str:
        return self._stderr_tail.decode("utf-8", errors="replace")

    def mark_dead(self, diagnostic: str = "") -> None:
        if self.state != "dead":
            self.state = "dead"
            self.diagnostic = diagnostic or self.stderr_tail()


class ReplicaSet:
    """Spawns, supervises, and load-balances the replicas of one servable."""

    def __init__(
        self,
        record: ServableRecord,
        package_dir: Path,
        replicas: int,
        startup_timeout_s: float = DEFAULT_STARTUP_TIMEOUT_S,
        invoke_deadline_s: float = DEFAULT_INVOKE_DEADLINE_S,
    ):
        if replicas < 1:
            raise ExecutorError("at least one replica is required")
        self.record = record
        self.package_dir = Path(package_dir)
        self.startup_timeout_s = startup_timeout_s
        self.invoke_deadline_s = invoke_deadline_s
        self.handles = [WorkerHandle(i) for i in range(replicas)]
        self._socket_dir = tempfile.mkdtemp(prefix="svh-")
        self._socket_seq = itertools.count()
        self._closing = False

    # -- lifecycle ----------------------------------------------------------

    async def start(self) -> None:
        await asyncio.gather(*(self._spawn(h) for h in self.handles))
        failed = [h for h in self.handles if h.state == "dead"]
        if len(failed) == len(self.handles):
            detail = failed[0].diagnostic
            raise WorkerStartupError(
                f"all {len(self.handles)} replicas of {self.record.id.render()} failed to start: {detail}"
            )

    async def stop(self) -> None:
        self._closing = True
        await asyncio.gather(*(self._stop_one(h) for h in self.handles), return_exceptions=True)
        for name in os.listdir(self._socket_dir):
            try:
                os.unlink(os.path.join(self._socket_dir, name))
            except OSError:
                pass
        try:
            os.rmdir(self._socket_dir)
        except OSError:
            pass

    async def _stop_one(self, handle: WorkerHandle) -> None:
        if handle.writer is not None and handle.state != "dead":
            try:
                await write_frame(handle.writer, Frame(WorkerKind.SHUTDOWN, uuid4()))
            except (ConnectionError, OSError):
                pass
        if handle.process is not None:
            try:
                await asyncio.wait_for(handle.process.wait(), timeout=2.0)
            except asyncio.TimeoutError:
                handle.process.kill()
                await handle.process.wait()
        handle.mark_dead("stopped")

    async def _spawn(self, handle: WorkerHandle) -> None:
        handle.state = "starting"
        handle.diagnostic = ""
        handle._stderr_tail = bytearray()
        socket_path = os.path.join(self._socket_dir, f"r{handle.replica_index}-{next(self._socket_seq)}.sock")

        connected: asyncio.Future = asyncio.get_running_loop().create_future()

        async def on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
            if not connected.done():
                connected.set_result((reader, writer))
            else:
                writer.close()

        server = await asyncio.start_unix_server(on_connect, path=socket_path)
        env = dict(os.environ)
        env["SERVEHUB_SOCKET"] = socket_path
        env["SERVEHUB_REPLICA"] = str(handle.replica_index)

        command = self.package_dir / self.record.entrypoint.command
        try:
            handle.process = await asyncio.create_subprocess_exec(
                str(command),
                *self.record.entrypoint.args,
                cwd=self.package_dir,
                env=env,
                stdout=asyncio.subprocess.DEVNULL,
                stderr=asyncio.subprocess.PIPE,
            )
        except OSError as exc:
            server.close()
            handle.mark_dead(f"spawn failed: {exc}")
            return
        handle.started_at = time.time()
        asyncio.ensure_future(self._drain_stderr(handle, handle.process))

        try:
            reader, writer = await asyncio.wait_for(connected, timeout=self.startup_timeout_s)
            handle.reader, handle.writer = reader, writer
            ping = Frame(WorkerKind.PING, uuid4())
            await write_frame(writer, ping)
            pong = await asyncio.wait_for(read_frame(reader, WorkerKind), timeout=self.startup_timeout_s)
            if pong.kind != WorkerKind.PONG or pong.correlation_id != ping.correlation_id:
                raise ProtocolError(f"expected PONG, got {pong.kind.name}")
        except (asyncio.TimeoutError, asyncio.IncompleteReadError, ProtocolError, ConnectionError) as exc:
            await self._kill(handle)
            handle.mark_dead(f"worker did not become ready: {exc}; stderr: {handle.stderr_tail()}")
        else:
            handle.state = "ready"
            handle._monitor = asyncio.ensure_future(self._watch_exit(handle, handle.process))
        finally:
            server.close()

    async def _drain_stderr(self, handle: WorkerHandle, process: asyncio.subprocess.Process) -> None:
        assert process.stderr is not None
        while True:
            chunk = await process.stderr.read(1024)
            if not chunk:
                return
            handle._stderr_tail.extend(chunk)
            if len(handle._stderr_tail) > _STDERR_TAIL_BYTES:
                del handle._stderr_tail[: len(handle._stderr_tail) - _STDERR_TAIL_BYTES]

    async def _watch_exit(self, handle: WorkerHandle, process: asyncio.subprocess.Process) -> None:
        await process.wait()
        if handle.process is process and not self._closing:
            handle.mark_dead(f"worker exited with code {process.returncode}")

    async def _kill(self, handle: WorkerHandle) -> None:
        if handle.process is not None and handle.process.returncode is None:
            handle.process.kill()
            try:
                await asyncio.wait_for(handle.process.wait(), timeout=5.0)
            except asyncio.TimeoutError:
                pass
        if handle.writer is not None:
            handle.writer.close()

    async def restart(self, handle: WorkerHandle) -> None:
        await self._kill(handle)
        if handle._monitor is not None:
            handle._monitor.cancel()
        await self._spawn(handle)

    # -- invocation -----------------------------------------------------------

    def pick(self) -> WorkerHandle | None:
        """Least assigned tasks wins; ties go to the lowest replica index."""
        ready = [h for h in self.handles if h.state in ("ready", "busy")]
        if not ready:
            return None
        return min(ready, key=lambda h: (h.assigned, h.replica_index))

    async def invoke(self, handle: WorkerHandle, inputs: list[Any], deadline_s: float | None = None) -> tuple[list[Any], float]:
        """Send one invocation and return (outputs, worker-reported inference_ms)."""
        deadline = deadline_s if deadline_s is not None else self.invoke_deadline_s
        async with handle.lock:
            if handle.state == "dead" or handle.reader is None or handle.writer is None:
                raise WorkerDied(f"replica {handle.replica_index} is not running")
            handle.state = "busy"
            handle.invocations += 1
            kind = WorkerKind.INVOKE if len(inputs) == 1 else WorkerKind.INVOKE_BATCH
            request = Frame.with_payload(kind, {"inputs": list(inputs)})
            try:
                await write_frame(handle.writer, request)
                reply = await asyncio.wait_for(
                    read_frame(handle.reader, WorkerKind), timeout=deadline
                )
            except asyncio.TimeoutError:
                await self._kill(handle)
                handle.mark_dead("invocation deadline exceeded")
                asyncio.ensure_future(self.restart(handle))
                raise InvokeTimeout(
                    f"replica {handle.replica_index} exceeded the {deadline:g}s deadline"
                ) from None
            except (ConnectionError, asyncio.IncompleteReadError, BrokenPipeError) as exc:
                handle.mark_dead(f"connection lost: {exc}")
                raise WorkerDied(f"replica {handle.replica_index} died mid-invocation") from exc
            finally:
                if handle.state == "busy":
                    handle.state = "ready" if handle.reader is not None else "dead"

            if reply.correlation_id != request.correlation_id:
                await self._fail_protocol(handle, "correlation id mismatch")
            if reply.kind == WorkerKind.ERROR:
                message = (reply.payload() or {}).get("message", "worker error")
                raise WorkerError(message)
            if reply.kind != WorkerKind.OUTPUT:
                await self._fail_protocol(handle, f"unexpected reply kind {reply.kind.name}")
            payload = reply.payload()
            outputs = payload.get("outputs")
            inference_ms = payload.get("inference_ms")
            if not isinstance(outputs, list) or len(outputs) != len(inputs):
                await self._fail_protocol(
                    handle, f"expected {len(inputs)} outputs, got {outputs!r:.80}"
                )
            if not isinstance(inference_ms, (int, float)) or inference_ms < 0:
                await self._fail_protocol(handle, f"bad inference_ms {inference_ms!r}")
            return outputs, float(inference_ms)

    async def _fail_protocol(self, handle: WorkerHandle, message: str) -> None:
        await self._kill(handle)
        handle.mark_dead(f"protocol violation: {message}")
        asyncio.ensure_future(self.restart(handle))
        raise ProtocolError(f"replica {handle.replica_index}: {message}")

    async def invoke_balanced(self, inputs: list[Any], deadline_s: float | None = None) -> tuple[list[Any], float, int]:
        """Route to the least-loaded replica, reviving dead ones when needed.

        Retries once on a fresh replica when the chosen worker dies mid-call,
        then gives up so queue-level retry rules stay predictable.
        """
        attempts = 0
        restarted = False
        while True:
            handle = self.pick()
            if handle is None:
                if restarted:
                    raise ExecutorUnavailable(
                        f"no replica of {self.record.id.render()} could be restarted"
                    )
                restarted = True
                await asyncio.gather(*(self.restart(h) for h in self.handles if h.state == "dead"))
                continue
            handle.assigned += 1
            try:
                outputs, inference_ms = await self.invoke(handle, inputs, deadline_s)
                return outputs, inference_ms, handle.replica_index
            except (WorkerDied, ProtocolError):
                if attempts >= 1:
                    raise
                attempts += 1
            finally:
                handle.assigned -= 1
