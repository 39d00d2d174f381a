"""Worker loop semantics and the byte-level conformance driver."""

from __future__ import annotations

import os
import socket
import subprocess
import sys
import tempfile
import time

import pytest

from servehub.conformance import run_worker_conformance
from servehub.executor import ReplicaSet
from servehub.packages import unpack_archive
from servehub.workers import synthetic_handler
from conftest import WORKERS_DIR, make_record, package_script, run
from servehub.domain import Entrypoint


class TestSyntheticHandlers:
    def test_noop_returns_hello_world_per_input(self):
        handler = synthetic_handler("noop")
        assert handler([None, None, None]) == ["hello world"] * 3

    def test_echo_identity(self):
        handler = synthetic_handler("echo")
        assert handler([1, "a", None]) == [1, "a", None]

    def test_sleep_cost_is_per_call_not_per_item(self):
        handler = synthetic_handler("sleep:80")
        t0 = time.perf_counter()
        outputs = handler([1, 2, 3, 4, 5])
        elapsed = time.perf_counter() - t0
        assert outputs == [1, 2, 3, 4, 5]
        assert 0.08 <= elapsed < 0.2  # one sleep, not five

    def test_spin_cost_grows_with_batch(self):
        handler = synthetic_handler("spin", "20")
        t0 = time.perf_counter()
        handler([None] * 5)
        per_item_batch = time.perf_counter() - t0
        assert per_item_batch >= 0.095  # five 20ms spins

    def test_compact_and_split_arg_forms_agree(self):
        a = synthetic_handler("sleep:10")
        b = synthetic_handler("sleep", "10")
        assert a([1]) == b([1])

    def test_unknown_kind_raises(self):
        with pytest.raises(ValueError):
            synthetic_handler("teleport")


class TestConformanceDriver:
    def test_python_worker_passes_conformance(self, tmp_path):
        package = package_script(WORKERS_DIR / "conformance_worker.py")
        pkg_dir = tmp_path / "pkg"
        unpack_archive(package, pkg_dir)
        report = run(
            run_worker_conformance([str(pkg_dir / "worker.py")], n_requests=50, cwd=str(pkg_dir))
        )
        assert report.passed, report.failures
        assert any("load ran exactly once" in c for c in report.checks)
        assert any("canonical form" in c for c in report.checks)

    def test_driver_catches_non_echo_worker(self, tmp_path):
        # the noop worker ignores inputs, so the echo vectors must fail
        from servehub.packages import build_worker_archive

        package, entrypoint = build_worker_archive("noop")
        pkg_dir = tmp_path / "pkg"
        unpack_archive(package, pkg_dir)
        report = run(
            run_worker_conformance(
                [str(pkg_dir / "worker.py"), *entrypoint.args], n_requests=5, cwd=str(pkg_dir)
            )
        )
        assert not report.passed


class TestWorkerProcessBehavior:
    def test_malformed_frame_exits_nonzero(self, tmp_path):
        package = package_script(WORKERS_DIR / "conformance_worker.py")
        pkg_dir = tmp_path / "pkg"
        unpack_archive(package, pkg_dir)
        socket_path = os.path.join(tempfile.mkdtemp(prefix="svh-t-"), "w.sock")
        server = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        server.bind(socket_path)
        server.listen(1)
        env = {**os.environ, "SERVEHUB_SOCKET": socket_path, "SERVEHUB_REPLICA": "0"}
        process = subprocess.Popen(
            [str(pkg_dir / "worker.py")], cwd=pkg_dir, env=env,
            stderr=subprocess.DEVNULL,
        )
        try:
            conn, _ = server.accept()
            # a frame with an unknown kind byte is a protocol violation
            conn.sendall((17).to_bytes(4, "big") + bytes([250]) + b"\x00" * 16)
            code = process.wait(timeout=10)
            assert code == 2
        finally:
            process.kill()
            server.close()

    def test_failing_load_exits_before_ready(self, tmp_path):
        script = tmp_path / "badload.py"
        script.write_text(
            f"#!{sys.executable}\n"
            "from servehub.workers import serve\n"
            "def load():\n    raise RuntimeError('no weights')\n"
            "serve(lambda i: i, load=load)\n"
        )
        script.chmod(0o755)
        env = {**os.environ, "SERVEHUB_SOCKET": "/tmp/never-used.sock", "SERVEHUB_REPLICA": "0"}
        process = subprocess.run(
            [str(script)], env=env, capture_output=True, timeout=30, text=True
        )
        assert process.returncode != 0
        assert "no weights" in process.stderr

    def test_slow_load_delays_readiness(self, tmp_path):
        package = package_script(WORKERS_DIR / "slow_load_worker.py")
        pkg_dir = tmp_path / "pkg"
        unpack_archive(package, pkg_dir)
        record = make_record(entrypoint=Entrypoint("worker.py", ("0.8",)))

        async def go():
            rs = ReplicaSet(record, pkg_dir, 1, startup_timeout_s=15.0)
            t0 = time.perf_counter()
            await rs.start()
            elapsed = time.perf_counter() - t0
            try:
                assert rs.handles[0].state == "ready"
                assert elapsed >= 0.8
            finally:
                await rs.stop()

        run(go())
