"""Run a complete servehub deployment inside one process.

Used by the benchmark harness for its self-hosted mode and by integration
tests: a repository, the management service with its REST and queue
listeners on ephemeral ports, and any number of in-process Task Managers
with real worker subprocesses. The REST surface is the only way callers
interact with it, so measurements taken through a stack match a split
deployment.
"""

from __future__ import annotations

import asyncio
import threading
from pathlib import Path
from typing import Any, Coroutine
from uuid import uuid4

import uvicorn

from servehub.domain import ServableId, ServableRecord, TypeDescriptor, Visibility
from servehub.manager import ManagerConfig, TaskManager
from servehub.packages import build_worker_archive
from servehub.repository import MetadataDraft, Repository
from servehub.rest import create_app
from servehub.service import BatchPolicy, ManagementService

__all__ = ["DEFAULT_TOKENS", "LocalStack", "ThreadedStack"]

DEFAULT_TOKENS = {
    "alice-token": "alice",
    "bob-token": "bob",
    "carol-token": "carol",
    "dave-token": "dave",
}


class LocalStack:
    """Async deployment: call :meth:`start`, use it, then :meth:`stop`."""

    def __init__(
        self,
        root: Path | str,
        tokens: dict[str, str] | None = None,
        cache_enabled: bool = True,
        batch_policy: BatchPolicy = BatchPolicy(),
        heartbeat_s: float = 5.0,
        dispatch_timeout_s: float = 30.0,
        result_ttl_s: float = 3600.0,
    ):
        self.root = Path(root)
        self.tokens = dict(tokens or DEFAULT_TOKENS)
        self.repository = Repository(self.root / "repo")
        self.service = ManagementService(
            repository=self.repository,
            state_dir=self.root / "state",
            tokens=self.tokens,
            queue_port=0,
            cache_enabled=cache_enabled,
            batch_policy=batch_policy,
            heartbeat_s=heartbeat_s,
            dispatch_timeout_s=dispatch_timeout_s,
            result_ttl_s=result_ttl_s,
        )
        self.managers: list[TaskManager] = []
        self._manager_tasks: list[asyncio.Task] = []
        self._uvicorn: uvicorn.Server | None = None
        self._uvicorn_task: asyncio.Task | None = None
        self.port = 0

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    @property
    def queue_addr(self) -> str:
        return f"127.0.0.1:{self.service.queue_port}"

    async def start(self) -> "LocalStack":
        await self.service.start()
        app = create_app(self.service)
        config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning", lifespan="off")
        self._uvicorn = uvicorn.Server(config)
        self._uvicorn_task = asyncio.ensure_future(self._uvicorn.serve())
        while not self._uvicorn.started:
            if self._uvicorn_task.done():
                self._uvicorn_task.result()
            await asyncio.sleep(0.01)
        self.port = self._uvicorn.servers[0].sockets[0].getsockname()[1]
        return self

    async def stop(self) -> None:
        for manager in self.managers:
            manager.request_stop()
            if manager._writer is not None:
                manager._writer.close()
        for task in self._manager_tasks:
            try:
                await asyncio.wait_for(task, timeout=10.0)
            except (asyncio.TimeoutError, Exception):
                task.cancel()
        self.managers.clear()
        self._manager_tasks.clear()
        if self._uvicorn is not None:
            self._uvicorn.should_exit = True
            assert self._uvicorn_task is not None
            await self._uvicorn_task
        await self.service.stop()

    # -- publishing helpers ---------------------------------------------------

    def publish_worker(
        self,
        owner: str,
        name: str,
        kind: str,
        *args: str,
        input_kind: str = "null",
        output_kind: str | None = None,
        description: str = "",
        tags: tuple[str, ...] = (),
        visibility: Visibility | None = None,
        replicas_default: int = 1,
    ) -> ServableRecord:
        """Publish one synthetic worker package and return its record."""
        if output_kind is None:
            output_kind = "string" if kind.startswith("noop") else input_kind
        package, entrypoint = build_worker_archive(kind, *args)
        draft = MetadataDraft(
            namespace=owner,
            name=name,
            title=name.replace("-", " "),
            description=description or f"synthetic {kind} workload",
            authors=(owner,),
            model_type="function",
            input_schema=TypeDescriptor.scalar(input_kind),
            output_schema=TypeDescriptor.scalar(output_kind),
            tags=tags,
            visibility=visibility or Visibility.public(),
        )
        return self.repository.publish(draft, package, entrypoint, owner, replicas_default)

    # -- managers ------------------------------------------------------------------

    async def add_manager(
        self,
        servables: list[ServableId],
        capacity: int = 8,
        replica_overrides: dict[ServableId, int] | None = None,
        heartbeat_s: float | None = None,
        ready_timeout_s: float = 30.0,
    ) -> TaskManager:
        """Start an in-process Task Manager and wait until its replicas are up."""
        cache_dir = self.root / "managers" / uuid4().hex[:8]
        config = ManagerConfig(
            management_addr=self.queue_addr,
            http_addr=self.base_url,
            servable_cache_dir=cache_dir,
            capacity=capacity,
            servables=tuple(servables),
            replica_overrides=dict(replica_overrides or {}),
            heartbeat_s=heartbeat_s or 5.0,
            reconnect_base_s=0.2,
        )
        manager = TaskManager(config)
        task = asyncio.ensure_future(manager.run())
        deadline = asyncio.get_running_loop().time() + ready_timeout_s
        while True:
            if manager._deploy_done is not None and manager._deploy_done.is_set():
                break
            if task.done():
                task.result()
                raise RuntimeError("manager exited before becoming ready")
            if asyncio.get_running_loop().time() > deadline:
                raise TimeoutError("manager did not become ready in time")
            await asyncio.sleep(0.02)
        self.managers.append(manager)
        self._manager_tasks.append(task)
        return manager


class ThreadedStack:
    """Synchronous facade: the whole stack runs on a loop in a daemon thread.

    Lets blocking callers (the bench CLI, CLI tests) drive the deployment
    over plain HTTP while the asyncio machinery lives elsewhere.
    """

    def __init__(self, root: Path | str, **kwargs: Any):
        self._loop = asyncio.new_event_loop()
        self._thread = threading.Thread(target=self._loop.run_forever, daemon=True)
        self._thread.start()
        self.stack: LocalStack = self.call(self._build(Path(root), kwargs))

    async def _build(self, root: Path, kwargs: dict[str, Any]) -> LocalStack:
        stack = LocalStack(root, **kwargs)
        await stack.start()
        return stack

    def call(self, coro: Coroutine) -> Any:
        """Run a coroutine on the stack's loop and wait for the result."""
        return asyncio.run_coroutine_threadsafe(coro, self._loop).result(timeout=300)

    @property
    def base_url(self) -> str:
        return self.stack.base_url

    @property
    def tokens(self) -> dict[str, str]:
        return self.stack.tokens

    def publish_worker(self, *args: Any, **kwargs: Any) -> ServableRecord:
        # the repository is thread-safe, so no loop hop is needed
        return self.stack.publish_worker(*args, **kwargs)

    def add_manager(self, *args: Any, **kwargs: Any) -> TaskManager:
        return self.call(self.stack.add_manager(*args, **kwargs))

    def remove_managers(self) -> None:
        self.call(self._remove_managers())

    async def _remove_managers(self) -> None:
        for manager in self.stack.managers:
            manager.request_stop()
            if manager._writer is not None:
                manager._writer.close()
        for task in self.stack._manager_tasks:
            try:
                await asyncio.wait_for(task, timeout=10.0)
            except asyncio.TimeoutError:
                task.cancel()
        self.stack.managers.clear()
        self.stack._manager_tasks.clear()

    def close(self) -> None:
        self.call(self.stack.stop())
        self._loop.call_soon_threadsafe(self._loop.stop)
        self._thread.join(timeout=10)

    def __enter__(self) -> "ThreadedStack":
        return self

    def __exit__(self, *exc_info: Any) -> None:
        self.close()
