"""servehub: the user-facing command line.

Git-like workflow: ``init`` scaffolds a servable draft in the working
directory, ``update`` edits it (or the published metadata with --remote),
``publish`` uploads it, ``run`` invokes it, ``ls`` lists tracked servable
directories (or remote search results), ``status`` shows the deployment.

Exit codes: 1 usage, 2 validation, 3 auth, 4 not found, 5 server/transport.
Server and token come from flags, then SERVEHUB_SERVER / SERVEHUB_TOKEN,
then ``$SERVEHUB_HOME/config.json`` (default ``~/.servehub``).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Any

import httpx

from servehub.domain import ServableId, ValidationError, canonical_json, parse_canonical
from servehub.packages import build_archive

EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_AUTH = 3
EXIT_NOT_FOUND = 4
EXIT_SERVER = 5

_STATUS_EXITS = {400: EXIT_VALIDATION, 401: EXIT_AUTH, 403: EXIT_AUTH, 404: EXIT_NOT_FOUND}


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_USAGE)


def home_dir() -> Path:
    return Path(os.environ.get("SERVEHUB_HOME", Path.home() / ".servehub"))


def load_config() -> dict[str, Any]:
    path = home_dir() / "config.json"
    if path.is_file():
        try:
            return json.loads(path.read_text())
        except json.JSONDecodeError:
            pass
    return {}


def resolve_server(args) -> tuple[str, str]:
    config = load_config()
    server = args.server or os.environ.get("SERVEHUB_SERVER") or config.get("server")
    token = args.token or os.environ.get("SERVEHUB_TOKEN") or config.get("token")
    if not server:
        raise CliError("no server configured (use --server or SERVEHUB_SERVER)", EXIT_USAGE)
    if not token:
        raise CliError("no token configured (use --token or SERVEHUB_TOKEN)", EXIT_AUTH)
    return server.rstrip("/"), token


def api_client(args) -> httpx.Client:
    server, token = resolve_server(args)
    return httpx.Client(
        base_url=server, headers={"Authorization": f"Bearer {token}"}, timeout=600.0
    )


def check(response: httpx.Response) -> Any:
    if response.status_code >= 400:
        detail = ""
        try:
            detail = response.json().get("error", "")
        except Exception:
            detail = response.text[:200]
        code = _STATUS_EXITS.get(response.status_code, EXIT_SERVER)
        raise CliError(f"HTTP {response.status_code}: {detail}", code)
    if response.content:
        return parse_canonical(response.content)
    return None


def emit(value: Any, args, human: str | None = None) -> None:
    """Canonical JSON with --json (or when no human rendering exists)."""
    if getattr(args, "json", False) or human is None:
        sys.stdout.write(canonical_json(value).decode() + "\n")
    else:
        sys.stdout.write(human + "\n")


# -- local draft handling -----------------------------------------------------

DRAFT_DIR = ".servehub"
DRAFT_FILE = "metadata.json"
PUBLISHED_FILE = "published.json"

_EXAMPLE_WORKER = """\
#!/usr/bin/env python3
\"\"\"Example servable: edit run() to call your model.\"\"\"
from servehub.workers import serve


def run(inputs):
    return ["hello world" for _ in inputs]


if __name__ == "__main__":
    serve(run)
"""


def draft_path(directory: Path) -> Path:
    return directory / DRAFT_DIR / DRAFT_FILE


def load_draft(directory: Path) -> dict[str, Any]:
    path = draft_path(directory)
    if not path.is_file():
        raise CliError(f"{directory} has no {DRAFT_DIR}/{DRAFT_FILE}; run init first", EXIT_VALIDATION)
    return json.loads(path.read_text())


def save_draft(directory: Path, manifest: dict[str, Any]) -> None:
    draft_path(directory).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def tracked_registry() -> Path:
    return home_dir() / "tracked.json"


def load_tracked() -> list[str]:
    path = tracked_registry()
    if path.is_file():
        try:
            return list(json.loads(path.read_text()).get("dirs", []))
        except json.JSONDecodeError:
            return []
    return []


def save_tracked(dirs: list[str]) -> None:
    path = tracked_registry()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"dirs": sorted(set(dirs))}, indent=2) + "\n")


# -- commands -------------------------------------------------------------------


def cmd_init(args) -> int:
    directory = Path(args.directory).resolve()
    target = directory / DRAFT_DIR
    if target.exists():
        raise CliError(f"{target} already exists; refusing to overwrite", EXIT_VALIDATION)
    if not args.namespace or not args.name:
        raise CliError("--namespace and --name are required", EXIT_USAGE)
    manifest = {
        "metadata": {
            "namespace": args.namespace,
            "name": args.name,
            "title": args.title or args.name,
            "description": args.description,
            "authors": args.author or [args.namespace],
            "model_type": args.model_type,
            "input_schema": {"kind": args.input_kind},
            "output_schema": {"kind": args.output_kind},
            "tags": args.tag or [],
            "visibility": {"kind": "public"},
        },
        "entrypoint": {"command": args.entrypoint, "args": args.entry_arg or []},
        "replicas_default": args.replicas,
    }
    target.mkdir(parents=True)
    save_draft(directory, manifest)
    worker = directory / args.entrypoint
    if not worker.exists() and args.entrypoint.endswith(".py"):
        worker.write_text(_EXAMPLE_WORKER)
        worker.chmod(0o755)
    save_tracked(load_tracked() + [str(directory)])
    emit(manifest, args, f"initialized {args.namespace}/{args.name} in {directory}")
    return 0


_VISIBILITY_FLAGS = ("public", "private")


def _parse_visibility(text: str) -> dict[str, Any]:
    if text in _VISIBILITY_FLAGS:
        return {"kind": text}
    if text.startswith("group:"):
        members = [m for m in text[len("group:") :].split(",") if m]
        return {"kind": "group", "members": members}
    raise CliError(f"visibility must be public, private, or group:<users>, got {text!r}", EXIT_VALIDATION)


def cmd_update(args) -> int:
    directory = Path(args.directory).resolve()
    manifest = load_draft(directory)
    metadata = manifest["metadata"]
    patch: dict[str, Any] = {}
    if args.title is not None:
        metadata["title"] = patch["title"] = args.title
    if args.description is not None:
        metadata["description"] = patch["description"] = args.description
    if args.author:
        metadata["authors"] = patch["authors"] = args.author
    if args.tag is not None:
        metadata["tags"] = patch["tags"] = args.tag
    if args.visibility is not None:
        metadata["visibility"] = patch["visibility"] = _parse_visibility(args.visibility)
    save_draft(directory, manifest)
    if args.remote:
        published = directory / DRAFT_DIR / PUBLISHED_FILE
        if not published.is_file():
            raise CliError("nothing published from this directory yet", EXIT_VALIDATION)
        sid = ServableId.parse(json.loads(published.read_text())["id"])
        with api_client(args) as client:
            record = check(
                client.patch(
                    f"/api/servables/{sid.namespace}/{sid.name}/{sid.version}",
                    content=canonical_json(patch),
                )
            )
        emit(record, args, f"updated {sid.render()} remotely")
    else:
        emit(manifest, args, f"updated draft in {directory}")
    return 0


def cmd_publish(args) -> int:
    directory = Path(args.directory).resolve()
    manifest = load_draft(directory)
    package = build_archive(directory)
    with api_client(args) as client:
        record = check(
            client.post(
                "/api/servables",
                data={"metadata": json.dumps(manifest)},
                files={"package": ("package.tar.gz", package, "application/gzip")},
            )
        )
    rendered = record["metadata"]["id"]
    (directory / DRAFT_DIR / PUBLISHED_FILE).write_text(
        json.dumps({"id": rendered, "server": resolve_server(args)[0]}, indent=2) + "\n"
    )
    save_tracked(load_tracked() + [str(directory)])
    if record.get("state") == "pending":
        emit(record, args, f"{rendered} published but pending: {record.get('diagnostic')}")
    else:
        emit(record, args, rendered)
    return 0


def _resolve_servable(client: httpx.Client, text: str) -> ServableId:
    """Accept ns/name:version or ns/name (latest visible version)."""
    if ":" in text:
        return ServableId.parse(text)
    namespace, _, name = text.partition("/")
    if not namespace or not name:
        raise CliError(f"servable must look like ns/name[:version], got {text!r}", EXIT_USAGE)
    records = check(
        client.get(
            "/api/servables",
            params={
                "filter": [
                    f"metadata.id.namespace:exact:{namespace}",
                    f"metadata.id.name:exact:{name}",
                ]
            },
        )
    )
    if not records:
        raise CliError(f"servable {text} not found", EXIT_NOT_FOUND)
    latest = max(records, key=lambda r: ServableId.parse(r["metadata"]["id"]).version)
    return ServableId.parse(latest["metadata"]["id"])


def _read_inputs(args) -> list[Any]:
    if args.input is not None and args.input_file is not None:
        raise CliError("use --input or --input-file, not both", EXIT_USAGE)
    if args.input is not None:
        raw = args.input
    elif args.input_file is not None:
        raw = Path(args.input_file).read_text()
    else:
        raise CliError("run requires --input or --input-file", EXIT_USAGE)
    try:
        value = parse_canonical(raw)
    except Exception as exc:
        raise CliError(f"input is not valid JSON: {exc}", EXIT_VALIDATION) from exc
    if args.batch:
        if not isinstance(value, list):
            raise CliError("--batch expects a JSON list of inputs", EXIT_VALIDATION)
        return value
    return [value]


def cmd_run(args) -> int:
    target = args.servable
    if target is None:
        published = Path(args.directory).resolve() / DRAFT_DIR / PUBLISHED_FILE
        if not published.is_file():
            raise CliError("no servable given and none published here", EXIT_USAGE)
        target = json.loads(published.read_text())["id"]
    inputs = _read_inputs(args)
    with api_client(args) as client:
        sid = _resolve_servable(client, target)
        body: dict[str, Any] = {"inputs": inputs, "async": args.async_mode}
        if args.no_cache:
            body["cache"] = False
        result = check(
            client.post(
                f"/api/servables/{sid.namespace}/{sid.name}/{sid.version}/run",
                content=canonical_json(body),
                headers={"Content-Type": "application/json"},
            )
        )
    if args.async_mode:
        emit(result, args, result["task_id"])
        return 0
    if result["status"] == "failed":
        emit(result, args, None)
        return EXIT_SERVER
    outputs = result["outputs"]
    value = outputs if args.batch else outputs[0]
    emit(value, args, canonical_json(value).decode())
    return 0


def cmd_task(args) -> int:
    with api_client(args) as client:
        result = check(client.get(f"/api/tasks/{args.task_id}"))
    emit(result, args, None)
    return 0


def cmd_ls(args) -> int:
    if args.remote:
        with api_client(args) as client:
            params: dict[str, Any] = {}
            if args.free_text:
                params["free_text"] = args.free_text
            records = check(client.get("/api/servables", params=params))
        if args.json:
            emit(records, args)
        else:
            for record in records:
                print(f"{record['metadata']['id']:<40} {record['state']:<8} {record['metadata']['title']}")
        return 0
    rows = []
    for directory in load_tracked():
        path = Path(directory)
        entry = {"path": directory, "id": None, "published": False}
        try:
            manifest = load_draft(path)
            metadata = manifest["metadata"]
            entry["id"] = f"{metadata['namespace']}/{metadata['name']}"
        except (CliError, KeyError, json.JSONDecodeError):
            entry["id"] = "(no draft)"
        published = path / DRAFT_DIR / PUBLISHED_FILE
        if published.is_file():
            entry["id"] = json.loads(published.read_text())["id"]
            entry["published"] = True
        rows.append(entry)
    if args.json:
        emit(rows, args)
    else:
        for row in rows:
            state = "published" if row["published"] else "unpublished"
            print(f"{row['id']:<40} {state:<12} {row['path']}")
    return 0


def cmd_status(args) -> int:
    with api_client(args) as client:
        status = check(client.get("/api/status"))
    if args.json:
        emit(status, args)
        return 0
    cache = status["cache"]
    tasks = status["tasks"]
    print(f"managers: {len(status['managers'])}")
    for manager in status["managers"]:
        print(
            f"  {manager['manager_id']}  capacity={manager['capacity']} "
            f"in_flight={manager['in_flight']} servables={len(manager['hosted_servables'])}"
        )
    print(f"cache: entries={cache['entries']} hits={cache['hits']} misses={cache['misses']}")
    print(f"tasks: pending={tasks['pending']} running={tasks['running']}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="servehub", description="servehub user CLI")
    parser.add_argument("--server", help="management service base URL")
    parser.add_argument("--token", help="bearer token")
    parser.add_argument("--json", action="store_true", help="machine-readable canonical JSON output")
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init", help="initialize a servable in a directory")
    p_init.add_argument("--directory", default=".")
    p_init.add_argument("--namespace")
    p_init.add_argument("--name")
    p_init.add_argument("--title")
    p_init.add_argument("--description", default="")
    p_init.add_argument("--author", action="append")
    p_init.add_argument("--model-type", default="function")
    p_init.add_argument("--input-kind", default="null")
    p_init.add_argument("--output-kind", default="string")
    p_init.add_argument("--tag", action="append")
    p_init.add_argument("--entrypoint", default="worker.py")
    p_init.add_argument("--entry-arg", action="append")
    p_init.add_argument("--replicas", type=int, default=1)
    p_init.set_defaults(func=cmd_init)

    p_update = sub.add_parser("update", help="edit the local draft (and remote with --remote)")
    p_update.add_argument("--directory", default=".")
    p_update.add_argument("--title")
    p_update.add_argument("--description")
    p_update.add_argument("--author", action="append")
    p_update.add_argument("--tag", action="append")
    p_update.add_argument("--visibility")
    p_update.add_argument("--remote", action="store_true")
    p_update.set_defaults(func=cmd_update)

    p_publish = sub.add_parser("publish", help="upload the servable package")
    p_publish.add_argument("--directory", default=".")
    p_publish.set_defaults(func=cmd_publish)

    p_run = sub.add_parser("run", help="invoke a published servable")
    p_run.add_argument("servable", nargs="?", help="ns/name[:version]; defaults to the one published here")
    p_run.add_argument("--directory", default=".")
    p_run.add_argument("--input", help="JSON input value")
    p_run.add_argument("--input-file", help="file containing the JSON input")
    p_run.add_argument("--batch", action="store_true", help="treat a JSON list as a batch of inputs")
    p_run.add_argument("--async", dest="async_mode", action="store_true", help="print the task id")
    p_run.add_argument("--no-cache", action="store_true", help="bypass memoization")
    p_run.set_defaults(func=cmd_run)

    p_task = sub.add_parser("task", help="fetch an async task result")
    p_task.add_argument("task_id")
    p_task.set_defaults(func=cmd_task)

    p_ls = sub.add_parser("ls", help="list tracked servable directories")
    p_ls.add_argument("--remote", action="store_true", help="list remote search results instead")
    p_ls.add_argument("--free-text", help="free text query with --remote")
    p_ls.set_defaults(func=cmd_ls)

    p_status = sub.add_parser("status", help="show deployment status")
    p_status.set_defaults(func=cmd_status)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"servehub: {exc}", file=sys.stderr)
        return exc.code
    except ValidationError as exc:
        print(f"servehub: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except httpx.TransportError as exc:
        print(f"servehub: cannot reach server: {exc}", file=sys.stderr)
        return EXIT_SERVER


if __name__ == "__main__":
    sys.exit(main())
