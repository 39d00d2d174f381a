"""Management-side endpoint of the task queue protocol.

Task Managers dial in over TCP, register what they can host, heartbeat
periodically, and receive TASK frames. Every TASK is answered by exactly
one RESULT on the same correlation id, or the connection is declared dead;
tasks in flight on a dead connection are re-dispatched once to another
eligible manager and otherwise fail with :class:`ManagerLost`.
"""

from __future__ import annotations

import asyncio
import logging
import time
from dataclasses import dataclass
from typing import Any, Awaitable, Callable
from uuid import UUID, uuid4

from servehub.domain import ServableId, ServeHubError, TaskRequest, ValidationError
from servehub.protocol import Frame, ProtocolError, QueueKind, read_frame, write_frame

__all__ = ["NoCapacity", "ManagerLost", "Registration", "Broker"]

log = logging.getLogger(__name__)

DEFAULT_HEARTBEAT_S = 5.0
MISSED_HEARTBEAT_LIMIT = 3
DEFAULT_DISPATCH_TIMEOUT_S = 30.0


class NoCapacity(ServeHubError):
    """No registered manager can take the task within the queue timeout."""


class ManagerLost(ServeHubError):
    """The manager executing the task disappeared and no retry was possible."""


@dataclass(frozen=True)
class Registration:
    """What one Task Manager offers: executors, servables, and concurrency."""

    manager_id: UUID
    executors: tuple[str, ...]
    hosted_servables: tuple[ServableId, ...]
    capacity: int

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValidationError("capacity must be positive")

    def to_payload(self) -> Any:
        return {
            "manager_id": str(self.manager_id),
            "executors": list(self.executors),
            "hosted_servables": [s.render() for s in self.hosted_servables],
            "capacity": self.capacity,
        }

    @classmethod
    def from_payload(cls, raw: Any) -> "Registration":
        try:
            return cls(
                manager_id=UUID(raw["manager_id"]),
                executors=tuple(raw["executors"]),
                hosted_servables=tuple(ServableId.parse(s) for s in raw["hosted_servables"]),
                capacity=int(raw["capacity"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ValidationError(f"malformed registration: {exc}") from exc


class _Pending:
    __slots__ = ("request", "future", "attempts")

    def __init__(self, request: TaskRequest):
        self.request = request
        self.future: asyncio.Future = asyncio.get_running_loop().create_future()
        self.attempts = 0


class _Link:
    """One live manager connection."""

    def __init__(self, registration: Registration, writer: asyncio.StreamWriter):
        self.registration = registration
        self.writer = writer
        self.in_flight: dict[UUID, _Pending] = {}
        self.last_heartbeat = time.monotonic()
        self.alive = True

    @property
    def manager_id(self) -> UUID:
        return self.registration.manager_id

    def hosts(self, servable: ServableId) -> bool:
        return servable in self.registration.hosted_servables

    def has_capacity(self) -> bool:
        return len(self.in_flight) < self.registration.capacity


# Resolves servable ids named in a REGISTER to record payloads (or None for
# unknown ids) so managers learn entrypoints and package digests at
# registration time instead of over an authenticated side channel.
ServableResolver = Callable[[list[ServableId]], Awaitable[dict[str, Any]]]


class Broker:
    """TCP server accepting manager connections and dispatching tasks to them."""

    def __init__(
        self,
        resolve_servables: ServableResolver,
        host: str = "127.0.0.1",
        port: int = 0,
        heartbeat_s: float = DEFAULT_HEARTBEAT_S,
        dispatch_timeout_s: float = DEFAULT_DISPATCH_TIMEOUT_S,
    ):
        self._resolve_servables = resolve_servables
        self._host = host
        self._port = port
        self.heartbeat_s = heartbeat_s
        self.dispatch_timeout_s = dispatch_timeout_s
        self._links: dict[UUID, _Link] = {}
        self._server: asyncio.base_events.Server | None = None
        self._changed: asyncio.Condition = asyncio.Condition()
        self._monitor_task: asyncio.Task | None = None
        self._closing = False

    @property
    def port(self) -> int:
        assert self._server is not None, "broker is not running"
        return self._server.sockets[0].getsockname()[1]

    async def start(self) -> None:
        self._server = await asyncio.start_server(self._handle_connection, self._host, self._port)
        self._monitor_task = asyncio.ensure_future(self._monitor_heartbeats())

    async def stop(self) -> None:
        self._closing = True
        if self._monitor_task is not None:
            self._monitor_task.cancel()
        for link in list(self._links.values()):
            try:
                await write_frame(link.writer, Frame(QueueKind.SHUTDOWN, uuid4()))
            except (ConnectionError, OSError):
                pass
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for link in list(self._links.values()):
            link.writer.close()

    # -- connection handling -------------------------------------------------

    async def _handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        link: _Link | None = None
        try:
            while True:
                frame = await read_frame(reader, QueueKind)
                if frame.kind == QueueKind.REGISTER:
                    link = await self._handle_register(frame, writer, link)
                elif link is None:
                    raise ProtocolError(f"{frame.kind.name} before REGISTER")
                elif frame.kind == QueueKind.HEARTBEAT:
                    link.last_heartbeat = time.monotonic()
                elif frame.kind == QueueKind.RESULT:
                    self._handle_result(link, frame)
                else:
                    raise ProtocolError(f"unexpected frame kind {frame.kind.name} from manager")
        except (asyncio.IncompleteReadError, ConnectionError, OSError):
            pass
        except ProtocolError as exc:
            log.warning("closing manager connection: %s", exc)
        finally:
            writer.close()
            if link is not None:
                await self._drop_link(link)

    async def _handle_register(
        self, frame: Frame, writer: asyncio.StreamWriter, existing: _Link | None
    ) -> _Link:
        registration = Registration.from_payload(frame.payload())
        if existing is not None and existing.manager_id == registration.manager_id:
            existing.registration = registration
            link = existing
        else:
            stale = self._links.get(registration.manager_id)
            if stale is not None:
                await self._drop_link(stale)
            link = _Link(registration, writer)
            self._links[registration.manager_id] = link
        records = await self._resolve_servables(list(registration.hosted_servables))
        ack = Frame.with_payload(
            QueueKind.REGISTER_ACK,
            {"ok": True, "heartbeat_s": self.heartbeat_s, "servables": records},
            frame.correlation_id,
        )
        await write_frame(writer, ack)
        async with self._changed:
            self._changed.notify_all()
        return link

    def _handle_result(self, link: _Link, frame: Frame) -> None:
        pending = link.in_flight.pop(frame.correlation_id, None)
        if pending is None:
            log.warning("RESULT for unknown correlation %s", frame.correlation_id)
            return
        if not pending.future.done():
            pending.future.set_result(frame.payload())
        asyncio.ensure_future(self._notify_changed())

    async def _notify_changed(self) -> None:
        async with self._changed:
            self._changed.notify_all()

    async def _drop_link(self, link: _Link) -> None:
        if not link.alive:
            return
        link.alive = False
        self._links.pop(link.manager_id, None)
        link.writer.close()
        orphaned = list(link.in_flight.values())
        link.in_flight.clear()
        for pending in orphaned:
            if pending.future.done():
                continue
            if pending.attempts >= 2:
                pending.future.set_exception(
                    ManagerLost(f"manager {link.manager_id} lost after retry")
                )
                continue
            target = self._select(pending.request.servable)
            if target is None:
                pending.future.set_exception(
                    ManagerLost(f"manager {link.manager_id} lost and no eligible backup")
                )
            else:
                await self._send_task(target, pending)
        await self._notify_changed()

    async def _monitor_heartbeats(self) -> None:
        interval = self.heartbeat_s
        while True:
            await asyncio.sleep(interval)
            deadline = time.monotonic() - MISSED_HEARTBEAT_LIMIT * self.heartbeat_s
            for link in list(self._links.values()):
                if link.last_heartbeat < deadline:
                    log.warning("manager %s missed %d heartbeats, deregistering",
                                link.manager_id, MISSED_HEARTBEAT_LIMIT)
                    await self._drop_link(link)

    # -- dispatch --------------------------------------------------------------

    def _select(self, servable: ServableId) -> _Link | None:
        eligible = [
            l for l in self._links.values() if l.alive and l.hosts(servable) and l.has_capacity()
        ]
        if not eligible:
            return None
        return min(eligible, key=lambda l: (len(l.in_flight), str(l.manager_id)))

    async def _send_task(self, link: _Link, pending: _Pending) -> None:
        pending.attempts += 1
        correlation = uuid4()
        link.in_flight[correlation] = pending
        body = {
            "task_id": str(pending.request.task_id),
            "servable": pending.request.servable.render(),
            "inputs": list(pending.request.inputs),
        }
        try:
            await write_frame(link.writer, Frame.with_payload(QueueKind.TASK, body, correlation))
        except (ConnectionError, OSError):
            # the send never reached the manager, so the task is still in the
            # orphan set handled by _drop_link's retry rule
            link.in_flight.pop(correlation, None)
            was_alive = link.alive
            await self._drop_link(link)
            if pending.future.done():
                return
            if not was_alive or pending.attempts >= 2:
                pending.future.set_exception(
                    ManagerLost(f"manager {link.manager_id} lost before task was sent")
                )
                return
            target = self._select(pending.request.servable)
            if target is None:
                pending.future.set_exception(
                    ManagerLost(f"manager {link.manager_id} lost and no eligible backup")
                )
            else:
                await self._send_task(target, pending)

    async def dispatch(self, request: TaskRequest, timeout_s: float | None = None) -> dict[str, Any]:
        """Send the task to the best manager and wait for its RESULT body.

        Queues for up to ``timeout_s`` when nothing is eligible, then raises
        :class:`NoCapacity`. Raises :class:`ManagerLost` when the executing
        manager vanished and the single retry was not possible.
        """
        timeout = self.dispatch_timeout_s if timeout_s is None else timeout_s
        deadline = time.monotonic() + timeout
        pending = _Pending(request)

        link = self._select(request.servable)
        while link is None:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise NoCapacity(f"no manager for {request.servable.render()} within {timeout:g}s")
            async with self._changed:
                try:
                    await asyncio.wait_for(self._changed.wait(), timeout=remaining)
                except asyncio.TimeoutError:
                    pass
            link = self._select(request.servable)

        await self._send_task(link, pending)
        return await pending.future

    # -- introspection -----------------------------------------------------------

    def manager_status(self) -> list[dict[str, Any]]:
        now = time.monotonic()
        return [
            {
                **link.registration.to_payload(),
                "alive": link.alive,
                "in_flight": len(link.in_flight),
                "heartbeat_age_s": round(now - link.last_heartbeat, 3),
            }
            for link in self._links.values()
        ]

    def total_in_flight(self) -> int:
        return sum(len(l.in_flight) for l in self._links.values())
