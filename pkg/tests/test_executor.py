"""Process executor: spawn, invoke, deadlines, restarts, adversarial workers."""

from __future__ import annotations

import asyncio
import time
from pathlib import Path

import pytest

from servehub.domain import Entrypoint
from servehub.executor import (
    InvokeTimeout,
    ReplicaSet,
    WorkerError,
    WorkerStartupError,
)
from servehub.packages import build_worker_archive, unpack_archive
from servehub.protocol import ProtocolError
from conftest import WORKERS_DIR, make_record, package_script, run


def unpack_worker(tmp_path: Path, kind: str, *args: str) -> tuple[Path, Entrypoint]:
    package, entrypoint = build_worker_archive(kind, *args)
    dest = tmp_path / "pkg"
    unpack_archive(package, dest)
    return dest, entrypoint


def unpack_script(tmp_path: Path, script: str, *args: str) -> tuple[Path, Entrypoint]:
    package = package_script(WORKERS_DIR / script)
    dest = tmp_path / "pkg"
    unpack_archive(package, dest)
    return dest, Entrypoint("worker.py", tuple(args))


def replica_set(tmp_path: Path, kind_or_script: str, *args: str, replicas=1, **kwargs) -> ReplicaSet:
    if kind_or_script.endswith(".py"):
        pkg_dir, entrypoint = unpack_script(tmp_path, kind_or_script, *args)
    else:
        pkg_dir, entrypoint = unpack_worker(tmp_path, kind_or_script, *args)
    record = make_record(entrypoint=entrypoint)
    return ReplicaSet(record, pkg_dir, replicas, **kwargs)


class TestSpawn:
    def test_noop_becomes_ready(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "noop")
            await rs.start()
            try:
                assert [h.state for h in rs.handles] == ["ready"]
                assert rs.handles[0].pid is not None
            finally:
                await rs.stop()

        run(go())

    def test_crashing_entrypoint_reports_stderr(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "crash_worker.py", startup_timeout_s=5.0)
            with pytest.raises(WorkerStartupError) as exc:
                await rs.start()
            assert "missing model weights" in str(exc.value)
            await rs.stop()

        run(go())

    def test_eight_replicas_distinct_indices(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "replica_env_worker.py", replicas=8)
            await rs.start()
            try:
                indices = set()
                for handle in rs.handles:
                    outputs, _ = await rs.invoke(handle, [None])
                    indices.add(outputs[0])
                assert indices == set(range(8))
            finally:
                await rs.stop()

        run(go())


class TestInvoke:
    def test_echo_batch_order_and_inference_time(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "echo")
            await rs.start()
            try:
                outputs, inference_ms = await rs.invoke(rs.handles[0], [1, 2, 3])
                assert outputs == [1, 2, 3]
                assert inference_ms > 0
            finally:
                await rs.stop()

        run(go())

    def test_sleep_duration_reflected_in_inference(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "sleep:100")
            await rs.start()
            try:
                _, inference_ms = await rs.invoke(rs.handles[0], [None])
                assert 100 <= inference_ms <= 150
            finally:
                await rs.stop()

        run(go())

    def test_worker_exception_surfaces_as_worker_error(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "misbehaving_worker.py")
            await rs.start()
            try:
                with pytest.raises(WorkerError) as exc:
                    await rs.invoke(rs.handles[0], ["boom"])
                assert "boom" in str(exc.value)
                # the worker survives its own exception
                outputs, _ = await rs.invoke(rs.handles[0], ["fine"])
                assert outputs == ["fine"]
            finally:
                await rs.stop()

        run(go())

    def test_wrong_output_count_is_protocol_error_then_recovers(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "misbehaving_worker.py")
            await rs.start()
            try:
                with pytest.raises(ProtocolError):
                    await rs.invoke(rs.handles[0], ["badcount"])
                # restart was scheduled; wait for the replica to come back
                for _ in range(100):
                    if rs.handles[0].state == "ready":
                        break
                    await asyncio.sleep(0.05)
                outputs, _ = await rs.invoke(rs.handles[0], ["ok"])
                assert outputs == ["ok"]
            finally:
                await rs.stop()

        run(go())

    def test_deadline_kills_and_restarts(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "misbehaving_worker.py", invoke_deadline_s=0.5)
            await rs.start()
            try:
                started = time.perf_counter()
                with pytest.raises(InvokeTimeout):
                    await rs.invoke(rs.handles[0], ["hang"])
                assert time.perf_counter() - started < 5
                for _ in range(100):
                    if rs.handles[0].state == "ready":
                        break
                    await asyncio.sleep(0.05)
                outputs, _ = await rs.invoke(rs.handles[0], ["alive"])
                assert outputs == ["alive"]
            finally:
                await rs.stop()

        run(go())


class TestRouting:
    def test_least_loaded_spreads_evenly(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "sleep:300", replicas=4)
            await rs.start()
            try:
                results = await asyncio.gather(
                    *(rs.invoke_balanced([i]) for i in range(8))
                )
                by_replica = {}
                for _, _, replica in results:
                    by_replica[replica] = by_replica.get(replica, 0) + 1
                assert by_replica == {0: 2, 1: 2, 2: 2, 3: 2}
            finally:
                await rs.stop()

        run(go())

    def test_single_replica_serializes_but_succeeds(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "echo", replicas=1)
            await rs.start()
            try:
                results = await asyncio.gather(*(rs.invoke_balanced([i]) for i in range(6)))
                assert [outs[0] for outs, _, _ in results] == list(range(6))
                assert {replica for _, _, replica in results} == {0}
            finally:
                await rs.stop()

        run(go())

    def test_killed_replica_restarted_and_serving(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "echo", replicas=1)
            await rs.start()
            try:
                rs.handles[0].process.kill()
                await asyncio.sleep(0.2)
                outputs, _, _ = await rs.invoke_balanced(["revived"])
                assert outputs == ["revived"]
            finally:
                await rs.stop()

        run(go())

    def test_in_flight_difference_bounded(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "sleep:100", replicas=3)
            await rs.start()
            try:
                max_spread = 0

                async def one(i):
                    nonlocal max_spread
                    loads = [h.assigned for h in rs.handles]
                    max_spread = max(max_spread, max(loads) - min(loads))
                    await rs.invoke_balanced([i])

                await asyncio.gather(*(one(i) for i in range(9)))
                assert max_spread <= 1
            finally:
                await rs.stop()

        run(go())


class TestRestartIdempotence:
    def test_twenty_kill_restart_cycles(self, tmp_path):
        async def go():
            rs = replica_set(tmp_path, "echo", replicas=1)
            await rs.start()
            try:
                for i in range(20):
                    await rs.restart(rs.handles[0])
                    assert rs.handles[0].state == "ready"
                    outputs, _ = await rs.invoke(rs.handles[0], [i])
                    assert outputs == [i]
            finally:
                await rs.stop()

        run(go())
