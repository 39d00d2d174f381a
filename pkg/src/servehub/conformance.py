"""Byte-level conformance fixtures and a driver for worker implementations.

The golden frame fixture pins the wire format: exact header layout, kind
bytes, and canonical body bytes for representative frames on both protocol
channels. Any worker implementation, in any language, must reproduce these
bytes. The fixture deliberately uses only values whose canonical JSON text
is identical across mainstream languages (integers, short binary fractions,
strings, nested containers, tagged bytes).

``run_worker_conformance`` drives a live worker process through the
conformance workload: PING, golden echo invocations, error recovery, and a
load-once check. The workload contract for conformance workers is echo,
except that the string input ``"loads?"`` answers with the number of times
the model loader ran, and ``"boom"`` raises.
"""

from __future__ import annotations

import asyncio
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any
from uuid import UUID

from servehub.domain import canonical_json, parse_canonical
from servehub.protocol import Frame, QueueKind, WorkerKind, decode_frame, encode_frame, read_frame, write_frame

__all__ = [
    "golden_frames",
    "write_fixture",
    "verify_fixture",
    "ConformanceReport",
    "run_worker_conformance",
    "ECHO_VECTORS",
]

_CORR = UUID("00112233-4455-6677-8899-aabbccddeeff")

# echo vectors exercised byte-for-byte; values canonicalize identically
# in Python and JavaScript
ECHO_VECTORS: list[Any] = [
    "hello world",
    0,
    -17,
    True,
    None,
    0.5,
    -3.25,
    [1, 2, 3],
    {"b": 1, "a": 2},
    {"nested": {"list": [1, "two", None], "flag": False}},
    "unicode: éß中文",
    b"\x00\x01\xfe\xff",
]


def golden_frames() -> list[dict[str, Any]]:
    """Build the fixture entries: named frames with their exact byte encoding."""
    entries: list[dict[str, Any]] = []

    def add(name: str, channel: str, frame: Frame) -> None:
        entries.append(
            {
                "name": name,
                "channel": channel,
                "kind": frame.kind.name,
                "kind_byte": int(frame.kind),
                "correlation_id": str(frame.correlation_id),
                "body_utf8": frame.body.decode("utf-8") if frame.body else "",
                "frame_hex": encode_frame(frame).hex(),
            }
        )

    add("worker-ping", "worker", Frame(WorkerKind.PING, _CORR))
    add("worker-pong", "worker", Frame(WorkerKind.PONG, _CORR))
    add("worker-shutdown", "worker", Frame(WorkerKind.SHUTDOWN, _CORR))
    for i, vector in enumerate(ECHO_VECTORS):
        add(
            f"worker-invoke-{i:02d}",
            "worker",
            Frame.with_payload(WorkerKind.INVOKE, {"inputs": [vector]}, _CORR),
        )
    add(
        "worker-invoke-batch",
        "worker",
        Frame.with_payload(WorkerKind.INVOKE_BATCH, {"inputs": [1, 2, 3]}, _CORR),
    )
    add(
        "worker-output",
        "worker",
        Frame.with_payload(WorkerKind.OUTPUT, {"outputs": [1, 2, 3], "inference_ms": 1.5}, _CORR),
    )
    add(
        "worker-error",
        "worker",
        Frame.with_payload(WorkerKind.ERROR, {"message": "boom"}, _CORR),
    )
    add("queue-heartbeat", "queue", Frame(QueueKind.HEARTBEAT, _CORR))
    add(
        "queue-register",
        "queue",
        Frame.with_payload(
            QueueKind.REGISTER,
            {
                "manager_id": str(_CORR),
                "executors": ["process"],
                "hosted_servables": ["alice/noop:1"],
                "capacity": 4,
            },
            _CORR,
        ),
    )
    add(
        "queue-task",
        "queue",
        Frame.with_payload(
            QueueKind.TASK,
            {"task_id": str(_CORR), "servable": "alice/noop:1", "inputs": [None]},
            _CORR,
        ),
    )
    add(
        "queue-result",
        "queue",
        Frame.with_payload(
            QueueKind.RESULT,
            {
                "task_id": str(_CORR),
                "status": "succeeded",
                "outputs": ["hello world"],
                "inference_ms": 2,
                "invocation_ms": 3,
            },
            _CORR,
        ),
    )
    return entries


def write_fixture(path: Path | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    document = {"frames": golden_frames()}
    path.write_text(json.dumps(document, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def verify_fixture(path: Path | str) -> None:
    """Assert the checked-in fixture matches what the codec produces today."""
    stored = json.loads(Path(path).read_text(encoding="utf-8"))["frames"]
    current = golden_frames()
    stored_by_name = {e["name"]: e for e in stored}
    current_by_name = {e["name"]: e for e in current}
    if stored_by_name.keys() != current_by_name.keys():
        raise AssertionError("fixture frame set differs from the codec's golden set")
    for name, entry in current_by_name.items():
        if stored_by_name[name] != entry:
            raise AssertionError(f"fixture frame {name!r} no longer matches the codec")
    # every stored frame must decode back to its stated fields
    for entry in stored:
        kinds = WorkerKind if entry["channel"] == "worker" else QueueKind
        frame, consumed = decode_frame(bytes.fromhex(entry["frame_hex"]), kinds)
        assert consumed == len(entry["frame_hex"]) // 2
        assert frame.kind.name == entry["kind"]
        assert int(frame.kind) == entry["kind_byte"]
        assert str(frame.correlation_id) == entry["correlation_id"]
        assert frame.body.decode("utf-8") == entry["body_utf8"]


@dataclass
class ConformanceReport:
    passed: bool
    checks: list[str] = field(default_factory=list)
    failures: list[str] = field(default_factory=list)

    def check(self, ok: bool, label: str) -> bool:
        if ok:
            self.checks.append(label)
        else:
            self.failures.append(label)
            self.passed = False
        return ok


async def run_worker_conformance(
    command: list[str],
    n_requests: int = 1000,
    cwd: str | None = None,
    env_extra: dict[str, str] | None = None,
    startup_timeout_s: float = 15.0,
) -> ConformanceReport:
    """Spawn a conformance worker and drive the byte-level suite against it.

    The worker must implement the conformance workload (echo with the
    ``"loads?"`` and ``"boom"`` special inputs) on top of whatever adapter
    is being verified.
    """
    report = ConformanceReport(passed=True)
    socket_dir = tempfile.mkdtemp(prefix="svh-conf-")
    socket_path = os.path.join(socket_dir, "w.sock")
    connected: asyncio.Future = asyncio.get_running_loop().create_future()

    async def on_connect(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        if not connected.done():
            connected.set_result((reader, writer))

    server = await asyncio.start_unix_server(on_connect, path=socket_path)
    env = dict(os.environ)
    env["SERVEHUB_SOCKET"] = socket_path
    env["SERVEHUB_REPLICA"] = "0"
    env.update(env_extra or {})
    process = await asyncio.create_subprocess_exec(
        *command, cwd=cwd, env=env, stderr=asyncio.subprocess.PIPE
    )
    try:
        try:
            reader, writer = await asyncio.wait_for(connected, timeout=startup_timeout_s)
        except asyncio.TimeoutError:
            stderr = b""
            if process.returncode is not None and process.stderr is not None:
                stderr = await process.stderr.read()
            report.check(False, f"worker connected (stderr: {stderr.decode(errors='replace')[:500]})")
            return report

        ping = Frame(WorkerKind.PING, _CORR)
        await write_frame(writer, ping)
        pong = await asyncio.wait_for(read_frame(reader, WorkerKind), timeout=5.0)
        report.check(pong.kind == WorkerKind.PONG, "PING answered with PONG")
        report.check(pong.correlation_id == _CORR, "PONG echoes the correlation id")
        report.check(pong.body == b"", "PONG body is empty")

        async def invoke(value: Any, batch: bool = False) -> Frame:
            inputs = value if batch else [value]
            frame = Frame.with_payload(
                WorkerKind.INVOKE_BATCH if batch else WorkerKind.INVOKE, {"inputs": inputs}
            )
            await write_frame(writer, frame)
            reply = await asyncio.wait_for(read_frame(reader, WorkerKind), timeout=10.0)
            report.check(reply.correlation_id == frame.correlation_id, "reply correlation matches")
            return reply

        # golden echo vectors, byte-level canonical form on the way back
        for vector in ECHO_VECTORS:
            reply = await invoke(vector)
            if not report.check(reply.kind == WorkerKind.OUTPUT, f"echo of {vector!r} returns OUTPUT"):
                continue
            payload = reply.payload()
            outputs = payload.get("outputs")
            report.check(
                isinstance(outputs, list) and len(outputs) == 1,
                f"echo of {vector!r} returns one output",
            )
            report.check(
                canonical_json(outputs[0]) == canonical_json(vector),
                f"echo of {vector!r} is value-identical",
            )
            report.check(
                isinstance(payload.get("inference_ms"), (int, float)) and payload["inference_ms"] >= 0,
                "inference_ms is a non-negative number",
            )
            report.check(
                reply.body == canonical_json(parse_canonical(reply.body)),
                "OUTPUT body is in canonical form",
            )

        # batch semantics
        reply = await invoke([10, 20, 30], batch=True)
        report.check(
            reply.kind == WorkerKind.OUTPUT and reply.payload()["outputs"] == [10, 20, 30],
            "INVOKE_BATCH echoes all inputs in order",
        )

        # error recovery: a raising input answers ERROR and the worker keeps serving
        reply = await invoke("boom")
        report.check(reply.kind == WorkerKind.ERROR, "raising input answers ERROR")
        report.check(
            "boom" in (reply.payload() or {}).get("message", ""),
            "ERROR message carries the exception text",
        )
        reply = await invoke("still alive")
        report.check(
            reply.kind == WorkerKind.OUTPUT and reply.payload()["outputs"] == ["still alive"],
            "worker serves normally after an ERROR",
        )

        # load-once over many requests
        for i in range(n_requests):
            reply = await invoke(i)
            if reply.kind != WorkerKind.OUTPUT or reply.payload()["outputs"] != [i]:
                report.check(False, f"request {i} echoed")
                break
        reply = await invoke("loads?")
        report.check(
            reply.kind == WorkerKind.OUTPUT and reply.payload()["outputs"] == [1],
            f"load ran exactly once across {n_requests} requests",
        )

        await write_frame(writer, Frame(WorkerKind.SHUTDOWN, _CORR))
        try:
            await asyncio.wait_for(process.wait(), timeout=5.0)
            report.check(process.returncode == 0, "worker exits 0 on SHUTDOWN")
        except asyncio.TimeoutError:
            report.check(False, "worker exits 0 on SHUTDOWN")
    finally:
        server.close()
        if process.returncode is None:
            process.kill()
            await process.wait()
        try:
            os.unlink(socket_path)
            os.rmdir(socket_dir)
        except OSError:
            pass
    return report
