"""Task Manager lifecycle: registration, staging, heartbeats, drain, reconnect."""

from __future__ import annotations

import time

from servehub.protocol import Frame, QueueKind, write_frame
from servehub.stack import ThreadedStack
from test_service import client_for, run_url


class TestRegistration:
    def test_two_servables_visible_in_status(self, stack):
        a = stack.publish_worker("alice", "noop", "noop")
        b = stack.publish_worker("alice", "echo", "echo", input_kind="integer")
        manager = stack.add_manager([a.id, b.id])
        with client_for(stack) as client:
            status = client.get("/api/status").json()
        hosted = status["managers"][0]["hosted_servables"]
        assert set(hosted) == {a.id.render(), b.id.render()}
        assert status["managers"][0]["manager_id"] == str(manager.manager_id)

    def test_unknown_servable_excluded_from_registration(self, stack):
        from servehub.domain import ServableId

        real = stack.publish_worker("alice", "noop", "noop")
        ghost = ServableId("alice", "ghost", 1)
        stack.add_manager([real.id, ghost])
        with client_for(stack) as client:
            status = client.get("/api/status").json()
            assert status["managers"][0]["hosted_servables"] == [real.id.render()]
            assert client.post(run_url(real), json={"inputs": [None]}).status_code == 200

    def test_pending_servable_excluded(self, stack):
        from servehub.domain import Entrypoint
        from servehub.packages import build_files_archive
        from servehub.repository import MetadataDraft
        from servehub.domain import TypeDescriptor

        draft = MetadataDraft(
            namespace="alice",
            name="broken",
            title="broken",
            description="",
            authors=("alice",),
            model_type="function",
            input_schema=TypeDescriptor.scalar("null"),
            output_schema=TypeDescriptor.scalar("null"),
        )
        package = build_files_archive({"other.txt": (b"x", 0o644)})
        record = stack.stack.repository.publish(draft, package, Entrypoint("worker.py"), "alice")
        assert record.state == "pending"
        ok = stack.publish_worker("alice", "fine", "noop")
        stack.add_manager([record.id, ok.id])
        with client_for(stack) as client:
            status = client.get("/api/status").json()
            assert status["managers"][0]["hosted_servables"] == [ok.id.render()]

    def test_replica_override_beats_record_default(self, stack):
        record = stack.publish_worker("alice", "multi", "echo", input_kind="integer", replicas_default=1)
        manager = stack.add_manager([record.id], replica_overrides={record.id: 3})
        assert len(manager.replica_sets[record.id].handles) == 3

    def test_package_staged_by_digest_and_reused(self, stack, tmp_path):
        record = stack.publish_worker("alice", "noop", "noop")
        manager = stack.add_manager([record.id])
        staged = manager.config.servable_cache_dir / record.package_digest
        assert (staged / ".complete").exists()
        assert (staged / "worker.py").exists()


class TestHeartbeatTolerance:
    def test_pause_within_three_beats_keeps_registration(self, tmp_path):
        with ThreadedStack(tmp_path / "hb", heartbeat_s=0.15) as stack:
            record = stack.publish_worker("alice", "noop", "noop")
            manager = stack.add_manager([record.id], heartbeat_s=0.15)
            manager.heartbeat_paused = True
            time.sleep(0.25)  # well under the 3-beat cutoff
            manager.heartbeat_paused = False
            with client_for(stack) as client:
                status = client.get("/api/status").json()
                assert len(status["managers"]) == 1
                assert client.post(run_url(record), json={"inputs": [None]}).status_code == 200

    def test_pause_beyond_three_beats_deregisters(self, tmp_path):
        with ThreadedStack(tmp_path / "hb2", heartbeat_s=0.1, dispatch_timeout_s=0.3) as stack:
            record = stack.publish_worker("alice", "noop", "noop")
            manager = stack.add_manager([record.id], heartbeat_s=0.1)
            manager.heartbeat_paused = True
            # keep the manager from dialing back in once the broker drops it,
            # so the deregistered state is observable
            manager.request_stop()
            deadline = time.time() + 5
            with client_for(stack) as client:
                while time.time() < deadline:
                    if not client.get("/api/status").json()["managers"]:
                        break
                    time.sleep(0.05)
                assert client.get("/api/status").json()["managers"] == []


class TestShutdownDrain:
    def test_shutdown_frame_drains_in_flight_task(self, stack):
        record = stack.publish_worker("alice", "napper", "sleep", "1000")
        manager = stack.add_manager([record.id])
        with client_for(stack) as client:
            submitted = client.post(
                run_url(record), json={"inputs": [None], "async": True, "cache": False}
            )
            task_id = submitted.json()["task_id"]
            time.sleep(0.2)  # the task is now in flight on the worker

            async def send_shutdown():
                link = stack.stack.service.broker._links[manager.manager_id]
                await write_frame(link.writer, Frame(QueueKind.SHUTDOWN))

            stack.call(send_shutdown())
            # the manager must finish the 1s task, deliver RESULT, then exit
            deadline = time.time() + 10
            status = None
            while time.time() < deadline:
                status = client.get(f"/api/tasks/{task_id}").json()["status"]
                if status == "succeeded":
                    break
                time.sleep(0.05)
            assert status == "succeeded"

            def manager_stopped():
                return all(t.done() for t in stack.stack._manager_tasks)

            deadline = time.time() + 10
            while time.time() < deadline and not manager_stopped():
                time.sleep(0.05)
            assert manager_stopped()


class TestReconnect:
    def test_manager_reconnects_after_connection_drop(self, stack):
        record = stack.publish_worker("alice", "noop", "noop")
        manager = stack.add_manager([record.id])

        async def drop_connection():
            link = stack.stack.service.broker._links[manager.manager_id]
            link.writer.transport.abort()

        stack.call(drop_connection())
        deadline = time.time() + 10
        with client_for(stack) as client:
            while time.time() < deadline:
                status = client.get("/api/status").json()
                if status["managers"]:
                    break
                time.sleep(0.05)
            assert status["managers"], "manager did not re-register"
            response = client.post(run_url(record), json={"inputs": [None], "cache": False})
            assert response.status_code == 200
            assert response.json()["outputs"] == ["hello world"]


class TestCapacityGauge:
    def test_in_flight_never_exceeds_capacity(self, stack):
        import concurrent.futures

        record = stack.publish_worker("alice", "napper", "sleep", "150")
        manager = stack.add_manager([record.id], capacity=3, replica_overrides={record.id: 3})
        peaks = []

        def sample():
            for _ in range(60):
                peaks.append(manager.in_flight_gauge)
                time.sleep(0.01)

        import threading

        sampler = threading.Thread(target=sample)
        sampler.start()
        with client_for(stack) as client:
            with concurrent.futures.ThreadPoolExecutor(max_workers=8) as pool:
                responses = list(
                    pool.map(
                        lambda i: client.post(
                            run_url(record), json={"inputs": [None], "cache": False}
                        ).status_code,
                        range(8),
                    )
                )
        sampler.join()
        assert all(code == 200 for code in responses)
        assert max(peaks) <= 3
