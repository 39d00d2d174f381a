"""Queue dispatch: registration, selection, retries, heartbeats, capacity."""

from __future__ import annotations

import asyncio
import time
from uuid import UUID, uuid4

import pytest

from servehub.broker import Broker, ManagerLost, NoCapacity, Registration
from servehub.domain import ServableId, TaskRequest
from servehub.protocol import Frame, QueueKind, read_frame, write_frame
from conftest import run

SID = ServableId("alice", "noop", 1)


async def resolver(ids):
    return {s.render(): {"stub": True} for s in ids}


class FakeManager:
    """Scripted queue client standing in for a Task Manager."""

    def __init__(self, manager_id=None, capacity=4, servables=(SID,), delay_s=0.0, respond=True):
        self.manager_id = manager_id or uuid4()
        self.capacity = capacity
        self.servables = list(servables)
        self.delay_s = delay_s
        self.respond = respond
        self.seen_tasks: list[dict] = []
        self.reader: asyncio.StreamReader | None = None
        self.writer: asyncio.StreamWriter | None = None
        self._loop_task: asyncio.Task | None = None

    async def connect(self, port: int):
        self.reader, self.writer = await asyncio.open_connection("127.0.0.1", port)
        frame = Frame.with_payload(
            QueueKind.REGISTER,
            {
                "manager_id": str(self.manager_id),
                "executors": ["process"],
                "hosted_servables": [s.render() for s in self.servables],
                "capacity": self.capacity,
            },
        )
        await write_frame(self.writer, frame)
        ack = await read_frame(self.reader, QueueKind)
        assert ack.kind == QueueKind.REGISTER_ACK
        self.ack_payload = ack.payload()
        self._loop_task = asyncio.ensure_future(self._serve())
        return self

    async def _serve(self):
        try:
            while True:
                frame = await read_frame(self.reader, QueueKind)
                if frame.kind == QueueKind.TASK:
                    self.seen_tasks.append(frame.payload())
                    if self.respond:
                        asyncio.ensure_future(self._reply(frame))
                elif frame.kind == QueueKind.SHUTDOWN:
                    return
        except (asyncio.IncompleteReadError, ConnectionError, OSError):
            return

    async def _reply(self, frame: Frame):
        if self.delay_s:
            await asyncio.sleep(self.delay_s)
        payload = frame.payload()
        body = {
            "task_id": payload["task_id"],
            "status": "succeeded",
            "outputs": [f"out-{v}" for v in payload["inputs"]],
            "inference_ms": 1.0,
            "invocation_ms": 2.0,
        }
        try:
            await write_frame(self.writer, Frame.with_payload(QueueKind.RESULT, body, frame.correlation_id))
        except (ConnectionError, OSError):
            pass

    async def heartbeat(self):
        await write_frame(self.writer, Frame(QueueKind.HEARTBEAT, uuid4()))

    def kill(self):
        if self._loop_task:
            self._loop_task.cancel()
        if self.writer:
            self.writer.transport.abort()


def request(inputs=("x",)):
    return TaskRequest(task_id=uuid4(), servable=SID, inputs=tuple(inputs))


class TestRegistrationAndDispatch:
    def test_register_then_single_dispatch(self):
        async def go():
            broker = Broker(resolver, heartbeat_s=5.0)
            await broker.start()
            try:
                manager = await FakeManager().connect(broker.port)
                assert manager.ack_payload["servables"][SID.render()] == {"stub": True}
                body = await broker.dispatch(request(["a", "b"]))
                assert body["status"] == "succeeded"
                assert body["outputs"] == ["out-a", "out-b"]
                assert broker.total_in_flight() == 0
            finally:
                await broker.stop()

        run(go())

    def test_zero_managers_times_out_with_no_capacity(self):
        async def go():
            broker = Broker(resolver, dispatch_timeout_s=0.3)
            await broker.start()
            try:
                started = time.monotonic()
                with pytest.raises(NoCapacity):
                    await broker.dispatch(request())
                assert 0.25 <= time.monotonic() - started < 2.0
            finally:
                await broker.stop()

        run(go())

    def test_task_waits_for_late_manager(self):
        async def go():
            broker = Broker(resolver, dispatch_timeout_s=5.0)
            await broker.start()
            try:
                pending = asyncio.ensure_future(broker.dispatch(request(["late"])))
                await asyncio.sleep(0.2)
                assert not pending.done()
                await FakeManager().connect(broker.port)
                body = await asyncio.wait_for(pending, timeout=5.0)
                assert body["outputs"] == ["out-late"]
            finally:
                await broker.stop()

        run(go())

    def test_least_in_flight_selection_with_tiebreak(self):
        async def go():
            broker = Broker(resolver)
            await broker.start()
            try:
                low = UUID(int=1)
                high = UUID(int=2)
                m_low = await FakeManager(manager_id=low, delay_s=0.3).connect(broker.port)
                m_high = await FakeManager(manager_id=high, delay_s=0.3).connect(broker.port)
                # both idle: tie broken by lowest manager id
                first = asyncio.ensure_future(broker.dispatch(request(["t1"])))
                await asyncio.sleep(0.05)
                assert len(m_low.seen_tasks) == 1
                # one busy: next goes to the idle one
                second = asyncio.ensure_future(broker.dispatch(request(["t2"])))
                await asyncio.sleep(0.05)
                assert len(m_high.seen_tasks) == 1
                await asyncio.gather(first, second)
            finally:
                await broker.stop()

        run(go())

    def test_capacity_gates_eligibility(self):
        async def go():
            broker = Broker(resolver, dispatch_timeout_s=5.0)
            await broker.start()
            try:
                manager = await FakeManager(capacity=1, delay_s=0.25).connect(broker.port)
                t0 = time.monotonic()
                results = await asyncio.gather(
                    broker.dispatch(request(["a"])), broker.dispatch(request(["b"]))
                )
                elapsed = time.monotonic() - t0
                assert all(r["status"] == "succeeded" for r in results)
                # second task had to wait for capacity, so roughly two delays
                assert elapsed >= 0.45
            finally:
                await broker.stop()

        run(go())


class TestCorrelation:
    def test_interleaved_results_resolve_their_own_tasks(self):
        """Replies may arrive in any order; each future must get its own body."""

        async def go():
            broker = Broker(resolver)
            await broker.start()
            try:
                manager = await FakeManager(capacity=16).connect(broker.port)

                original_reply = manager._reply

                async def jittered_reply(frame):
                    await asyncio.sleep(0.01 + (hash(frame.correlation_id) % 7) * 0.01)
                    await original_reply(frame)

                manager._reply = jittered_reply
                bodies = await asyncio.gather(
                    *(broker.dispatch(request([f"v{i}"])) for i in range(10))
                )
                for i, body in enumerate(bodies):
                    assert body["outputs"] == [f"out-v{i}"]
            finally:
                await broker.stop()

        run(go())


class TestFaultTolerance:
    def test_manager_death_retries_on_backup(self):
        async def go():
            broker = Broker(resolver)
            await broker.start()
            try:
                victim = await FakeManager(manager_id=UUID(int=1), respond=False).connect(broker.port)
                backup = await FakeManager(manager_id=UUID(int=2)).connect(broker.port)
                pending = asyncio.ensure_future(broker.dispatch(request(["retry-me"])))
                await asyncio.sleep(0.1)
                assert len(victim.seen_tasks) == 1
                victim.kill()
                body = await asyncio.wait_for(pending, timeout=5.0)
                assert body["outputs"] == ["out-retry-me"]
                assert len(backup.seen_tasks) == 1
            finally:
                await broker.stop()

        run(go())

    def test_manager_death_without_backup_is_manager_lost(self):
        async def go():
            broker = Broker(resolver)
            await broker.start()
            try:
                victim = await FakeManager(respond=False).connect(broker.port)
                pending = asyncio.ensure_future(broker.dispatch(request(["doomed"])))
                await asyncio.sleep(0.1)
                victim.kill()
                with pytest.raises(ManagerLost):
                    await asyncio.wait_for(pending, timeout=5.0)
            finally:
                await broker.stop()

        run(go())

    def test_double_death_exhausts_single_retry(self):
        async def go():
            broker = Broker(resolver)
            await broker.start()
            try:
                first = await FakeManager(manager_id=UUID(int=1), respond=False).connect(broker.port)
                second = await FakeManager(manager_id=UUID(int=2), respond=False).connect(broker.port)
                pending = asyncio.ensure_future(broker.dispatch(request(["twice"])))
                await asyncio.sleep(0.1)
                first.kill()
                await asyncio.sleep(0.1)
                assert len(second.seen_tasks) == 1
                second.kill()
                with pytest.raises(ManagerLost):
                    await asyncio.wait_for(pending, timeout=5.0)
                # total attempts across both managers bounded by two
                assert len(first.seen_tasks) + len(second.seen_tasks) == 2
            finally:
                await broker.stop()

        run(go())


class TestHeartbeats:
    def test_missed_heartbeats_deregister(self):
        async def go():
            broker = Broker(resolver, heartbeat_s=0.1)
            await broker.start()
            try:
                manager = await FakeManager().connect(broker.port)
                assert len(broker.manager_status()) == 1
                # silent manager: after 3 missed beats it must be gone
                await asyncio.sleep(0.6)
                assert broker.manager_status() == []
            finally:
                await broker.stop()

        run(go())

    def test_heartbeating_manager_stays_registered(self):
        async def go():
            broker = Broker(resolver, heartbeat_s=0.1)
            await broker.start()
            try:
                manager = await FakeManager().connect(broker.port)
                for _ in range(8):
                    await manager.heartbeat()
                    await asyncio.sleep(0.08)
                assert len(broker.manager_status()) == 1
            finally:
                await broker.stop()

        run(go())

    def test_reregister_updates_hosted_list(self):
        async def go():
            broker = Broker(resolver, dispatch_timeout_s=0.3)
            await broker.start()
            try:
                manager = await FakeManager().connect(broker.port)
                other = ServableId("alice", "other", 1)
                frame = Frame.with_payload(
                    QueueKind.REGISTER,
                    {
                        "manager_id": str(manager.manager_id),
                        "executors": ["process"],
                        "hosted_servables": [other.render()],
                        "capacity": 4,
                    },
                )
                await write_frame(manager.writer, frame)
                await asyncio.sleep(0.1)
                status = broker.manager_status()
                assert status[0]["hosted_servables"] == [other.render()]
                with pytest.raises(NoCapacity):
                    await broker.dispatch(request(["gone"]))
            finally:
                await broker.stop()

        run(go())
