"""Worker-side invocation loop and the built-in synthetic servables.

A worker process connects to the unix socket named by ``SERVEHUB_SOCKET``,
answers PING with PONG, executes INVOKE / INVOKE_BATCH requests one at a
time, and exits cleanly on SHUTDOWN. ``main`` serves one of the synthetic
workloads used by the test suite and the benchmark harness:

* ``noop``       returns "hello world" for every input
* ``echo``       returns its inputs unchanged
* ``sleep:<ms>`` sleeps once per invocation call, then echoes; batch cost
                 is fixed, like a vectorized model pass
* ``spin:<ms>``  burns CPU for <ms> per input item, then echoes; batch cost
                 grows with batch size
"""

from __future__ import annotations

import os
import socket
import sys
import time
import traceback
from typing import Any, Callable

from servehub.protocol import Frame, FrameReader, WorkerKind, encode_frame

__all__ = ["serve", "main", "synthetic_handler"]

RunFn = Callable[[list[Any]], list[Any]]

_RECV_CHUNK = 1 << 16


def _send(sock: socket.socket, frame: Frame) -> None:
    sock.sendall(encode_frame(frame))


def serve(run: RunFn, load: Callable[[], Any] | None = None, socket_path: str | None = None) -> None:
    """Run the worker loop until SHUTDOWN or EOF.

    ``load`` runs once, before the socket connection is made, so the worker
    only becomes reachable after its model is up. ``run`` receives the input
    batch and must return exactly one output per input; exceptions are
    reported as ERROR frames without killing the worker. A malformed frame
    exits non-zero so the supervisor restarts the process.
    """
    if load is not None:
        load()
    path = socket_path or os.environ["SERVEHUB_SOCKET"]
    sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    sock.connect(path)
    reader = FrameReader(WorkerKind)
    try:
        while True:
            chunk = sock.recv(_RECV_CHUNK)
            if not chunk:
                return
            try:
                frames = reader.feed(chunk)
            except Exception:
                traceback.print_exc(file=sys.stderr)
                sys.exit(2)
            for frame in frames:
                if frame.kind == WorkerKind.PING:
                    _send(sock, Frame(WorkerKind.PONG, frame.correlation_id))
                elif frame.kind in (WorkerKind.INVOKE, WorkerKind.INVOKE_BATCH):
                    _send(sock, _handle_invoke(run, frame))
                elif frame.kind == WorkerKind.SHUTDOWN:
                    return
                else:
                    print(f"unexpected frame kind {frame.kind}", file=sys.stderr)
                    sys.exit(2)
    finally:
        sock.close()


def _handle_invoke(run: RunFn, frame: Frame) -> Frame:
    try:
        payload = frame.payload()
        inputs = payload["inputs"]
        started = time.perf_counter()
        outputs = run(list(inputs))
        inference_ms = (time.perf_counter() - started) * 1000.0
        return Frame.with_payload(
            WorkerKind.OUTPUT,
            {"outputs": list(outputs), "inference_ms": inference_ms},
            frame.correlation_id,
        )
    except Exception:
        return Frame.with_payload(
            WorkerKind.ERROR,
            {"message": traceback.format_exc()},
            frame.correlation_id,
        )


def synthetic_handler(kind: str, *args: str) -> RunFn:
    """Build the run function for one synthetic workload.

    Accepts either ``("sleep", "100")`` or the compact ``("sleep:100",)``.
    """
    if ":" in kind and not args:
        kind, arg = kind.split(":", 1)
        args = (arg,)

    if kind == "noop":
        return lambda inputs: ["hello world"] * len(inputs)
    if kind == "echo":
        return lambda inputs: list(inputs)
    if kind == "sleep":
        delay_s = float(args[0]) / 1000.0

        def run_sleep(inputs: list[Any]) -> list[Any]:
            time.sleep(delay_s)
            return list(inputs)

        return run_sleep
    if kind == "spin":
        per_item_s = float(args[0]) / 1000.0

        def run_spin(inputs: list[Any]) -> list[Any]:
            # burn CPU time, not wall time, so contended cores dilate the
            # call the way a real compute-bound model would
            for _ in inputs:
                end = time.process_time() + per_item_s
                while time.process_time() < end:
                    pass
            return list(inputs)

        return run_spin
    raise ValueError(f"unknown synthetic worker kind {kind!r}")


def main(argv: list[str] | None = None) -> None:
    argv = sys.argv[1:] if argv is None else argv
    if not argv:
        print("usage: python -m servehub.workers <noop|echo|sleep:<ms>|spin:<ms>>", file=sys.stderr)
        sys.exit(1)
    serve(synthetic_handler(argv[0], *argv[1:]))


if __name__ == "__main__":
    main()
