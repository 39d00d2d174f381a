"""HTTP surface of the Management Service.

All request and response bodies use the canonical JSON payload encoding.
Domain errors map onto stable status codes: 400 for validation and query
problems, 401 for a missing or bad token, 403 for authorization failures,
404 for anything not found (or not visible), and 503 when no manager can
take a task within the queue timeout.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Any
from uuid import UUID

import uvicorn
from fastapi import Depends, FastAPI, File, Form, Request, Response, UploadFile

from servehub.broker import NoCapacity
from servehub.domain import (
    AuthorizationError,
    CanonicalizationError,
    NotFound,
    QueryError,
    ServableId,
    ValidationError,
    canonical_json,
    parse_canonical,
)
from servehub.repository import (
    FieldFilter,
    MetadataDraft,
    RangeFilter,
    Repository,
    SearchQuery,
)
from servehub.domain import Entrypoint
from servehub.service import BatchPolicy, ManagementService

__all__ = ["create_app", "main"]

log = logging.getLogger(__name__)


def _canonical_response(payload: Any, status_code: int = 200) -> Response:
    return Response(
        content=canonical_json(payload),
        status_code=status_code,
        media_type="application/json",
    )


def _error_response(status_code: int, message: str) -> Response:
    return _canonical_response({"error": message}, status_code)


async def _body_payload(request: Request) -> Any:
    raw = await request.body()
    if not raw:
        raise ValidationError("request body is empty")
    return parse_canonical(raw)


def create_app(service: ManagementService) -> FastAPI:
    app = FastAPI(title="servehub", docs_url=None, redoc_url=None)

    async def current_user(request: Request) -> str:
        header = request.headers.get("authorization", "")
        if not header.startswith("Bearer "):
            raise _Unauthenticated()
        user = service.authenticate(header[len("Bearer ") :].strip())
        if user is None:
            raise _Unauthenticated()
        return user

    class _Unauthenticated(Exception):
        pass

    @app.exception_handler(_Unauthenticated)
    async def _on_unauthenticated(request: Request, exc: _Unauthenticated) -> Response:
        return _error_response(401, "missing or invalid bearer token")

    @app.exception_handler(ValidationError)
    async def _on_validation(request: Request, exc: ValidationError) -> Response:
        return _error_response(400, str(exc))

    @app.exception_handler(CanonicalizationError)
    async def _on_canonicalization(request: Request, exc: CanonicalizationError) -> Response:
        return _error_response(400, str(exc))

    @app.exception_handler(QueryError)
    async def _on_query(request: Request, exc: QueryError) -> Response:
        return _error_response(400, str(exc))

    @app.exception_handler(NotFound)
    async def _on_not_found(request: Request, exc: NotFound) -> Response:
        return _error_response(404, str(exc))

    @app.exception_handler(AuthorizationError)
    async def _on_authorization(request: Request, exc: AuthorizationError) -> Response:
        return _error_response(403, str(exc))

    @app.exception_handler(NoCapacity)
    async def _on_no_capacity(request: Request, exc: NoCapacity) -> Response:
        return _error_response(503, str(exc))

    # -- servables ---------------------------------------------------------

    @app.post("/api/servables")
    async def publish(
        metadata: str = Form(...),
        package: UploadFile = File(...),
        user: str = Depends(current_user),
    ) -> Response:
        manifest = parse_canonical(metadata)
        draft = MetadataDraft.from_payload(manifest.get("metadata", {}))
        entrypoint = Entrypoint.from_payload(manifest.get("entrypoint", {}))
        replicas = int(manifest.get("replicas_default", 1))
        data = await package.read()
        record = await asyncio.to_thread(
            service.repository.publish, draft, data, entrypoint, user, replicas
        )
        return _canonical_response(record.to_payload(), 201)

    @app.get("/api/servables")
    async def search(request: Request, user: str = Depends(current_user)) -> Response:
        params = request.query_params
        field_filters = tuple(_parse_field_filter(f) for f in params.getlist("filter"))
        range_filters = tuple(_parse_range_filter(r) for r in params.getlist("range"))
        query = SearchQuery(
            requester=user,
            free_text=params.get("free_text") or None,
            field_filters=field_filters,
            range_filters=range_filters,
            limit=int(params.get("limit", 50)),
        )
        records = service.repository.search(query)
        return _canonical_response([r.to_payload() for r in records])

    @app.get("/api/servables/{ns}/{name}/{version}")
    async def get_servable(ns: str, name: str, version: int, user: str = Depends(current_user)) -> Response:
        record = service.repository.get(ServableId(ns, name, version), user)
        return _canonical_response(record.to_payload())

    @app.patch("/api/servables/{ns}/{name}/{version}")
    async def patch_servable(
        ns: str, name: str, version: int, request: Request, user: str = Depends(current_user)
    ) -> Response:
        patch = await _body_payload(request)
        if not isinstance(patch, dict):
            raise ValidationError("patch body must be an object")
        record = await asyncio.to_thread(
            service.repository.update_metadata, ServableId(ns, name, version), patch, user
        )
        return _canonical_response(record.to_payload())

    @app.post("/api/servables/{ns}/{name}/{version}/run")
    async def run_servable(
        ns: str, name: str, version: int, request: Request, user: str = Depends(current_user)
    ) -> Response:
        body = await _body_payload(request)
        if not isinstance(body, dict) or "inputs" not in body:
            raise ValidationError("run body must be an object with an inputs list")
        inputs = body["inputs"]
        if not isinstance(inputs, list):
            raise ValidationError("inputs must be a list")
        outcome = await service.submit(
            ServableId(ns, name, version),
            inputs,
            async_mode=bool(body.get("async", False)),
            requester=user,
            cache=body.get("cache"),
        )
        if isinstance(outcome, UUID):
            return _canonical_response({"task_id": str(outcome)}, 202)
        return _canonical_response(outcome.to_payload())

    # -- tasks ----------------------------------------------------------------

    @app.get("/api/tasks/{task_id}")
    async def task_status(task_id: str, user: str = Depends(current_user)) -> Response:
        try:
            parsed = UUID(task_id)
        except ValueError:
            raise NotFound(f"task {task_id} not found") from None
        result = service.task_status(parsed, user)
        return _canonical_response(result.to_payload())

    # -- pipelines ---------------------------------------------------------------

    @app.post("/api/pipelines")
    async def publish_pipeline(request: Request, user: str = Depends(current_user)) -> Response:
        manifest = await _body_payload(request)
        spec = service.publish_pipeline(manifest, user)
        return _canonical_response(spec.to_payload(), 201)

    @app.post("/api/pipelines/{ns}/{name}/{version}/run")
    async def run_pipeline(
        ns: str, name: str, version: int, request: Request, user: str = Depends(current_user)
    ) -> Response:
        body = await _body_payload(request)
        if not isinstance(body, dict) or "input" not in body:
            raise ValidationError("pipeline run body must be an object with an input value")
        result = await service.run_pipeline(ServableId(ns, name, version), body["input"], user)
        return _canonical_response(result.to_payload())

    # -- operations -----------------------------------------------------------------

    @app.get("/api/status")
    async def status(user: str = Depends(current_user)) -> Response:
        return _canonical_response(service.status())

    @app.get("/api/packages/{digest}")
    async def fetch_package(digest: str) -> Response:
        # content-addressed: knowing the digest is the capability, so managers
        # can stage packages without holding a user token
        data = await asyncio.to_thread(service.repository.fetch_package, digest)
        return Response(content=data, media_type="application/gzip")

    return app


def _parse_field_filter(text: str) -> FieldFilter:
    parts = text.split(":", 2)
    if len(parts) != 3:
        raise QueryError(f"filter must look like path:match:value, got {text!r}")
    path, match, value = parts
    return FieldFilter(path=path, value=value, match=match)


def _parse_range_filter(text: str) -> RangeFilter:
    parts = text.split(":", 2)
    if len(parts) != 3:
        raise QueryError(f"range must look like path:min:max, got {text!r}")
    path, low, high = parts
    try:
        return RangeFilter(
            path=path,
            min=float(low) if low else None,
            max=float(high) if high else None,
        )
    except ValueError as exc:
        raise QueryError(f"range bounds must be numeric: {exc}") from exc


def main(argv: list[str] | None = None) -> None:
    parser = argparse.ArgumentParser(prog="servehub-server", description="Run the servehub Management Service")
    parser.add_argument("--config", help="path to a service config JSON file")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8100)
    parser.add_argument("--queue-port", type=int, default=7100)
    parser.add_argument("--repo", default="./servehub-data", help="repository root directory")
    parser.add_argument("--log-level", default="info")
    args = parser.parse_args(argv)

    config: dict[str, Any] = {}
    if args.config:
        config = json.loads(Path(args.config).read_text())

    logging.basicConfig(stream=sys.stderr, level=args.log_level.upper())
    repo_root = Path(config.get("repository_dir", args.repo))
    state_dir = Path(config.get("state_dir", repo_root / "state"))
    batch_raw = config.get("batch", {})
    service = ManagementService(
        repository=Repository(repo_root),
        state_dir=state_dir,
        tokens=config.get("tokens", {}),
        queue_host=config.get("queue_host", args.host),
        queue_port=int(config.get("queue_port", args.queue_port)),
        cache_enabled=bool(config.get("cache_enabled", True)),
        cache_capacity=int(config.get("cache_capacity", 10_000)),
        batch_policy=BatchPolicy(
            mode=batch_raw.get("mode", "client-batch-only"),
            window_ms=float(batch_raw.get("window_ms", 5.0)),
            max_batch=int(batch_raw.get("max_batch", 64)),
        ),
        result_ttl_s=float(config.get("result_ttl_s", 3600.0)),
        heartbeat_s=float(config.get("heartbeat_s", 5.0)),
        dispatch_timeout_s=float(config.get("dispatch_timeout_s", 30.0)),
    )
    app = create_app(service)

    @app.on_event("startup")
    async def _startup() -> None:
        await service.start()
        log.info("queue listening on %s:%d", config.get("queue_host", args.host), service.queue_port)

    @app.on_event("shutdown")
    async def _shutdown() -> None:
        await service.stop()

    uvicorn.run(app, host=config.get("host", args.host), port=int(config.get("port", args.port)), log_level=args.log_level)


if __name__ == "__main__":
    main()
