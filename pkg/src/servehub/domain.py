"""Core value types shared by every servehub component.

Payload values are the JSON value model extended with a tagged bytes kind:
None, bool, int, float, str, bytes, lists, and string-keyed records. The
canonical encoding produced by :func:`canonical_json` is the single source
of truth for memoization keys, wire bodies, and metadata files.
"""

from __future__ import annotations

import base64
import json
import math
import re
import struct
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any
from uuid import UUID

__all__ = [
    "ServeHubError",
    "CanonicalizationError",
    "ValidationError",
    "AuthorizationError",
    "NotFound",
    "QueryError",
    "ServableId",
    "TypeDescriptor",
    "Visibility",
    "ServableMetadata",
    "Entrypoint",
    "ServableRecord",
    "Timings",
    "TaskError",
    "TaskRequest",
    "TaskResult",
    "Conformance",
    "canonical_json",
    "parse_canonical",
    "payloads_equal",
    "validate",
    "accepts",
]

BYTES_TAG = "$bytes"

_NAME_RE = re.compile(r"^[a-z0-9_-]{1,64}$")
_ID_RE = re.compile(r"^([a-z0-9_-]{1,64})/([a-z0-9_-]{1,64}):([1-9][0-9]*)$")


class ServeHubError(Exception):
    """Base class for all servehub errors."""


class CanonicalizationError(ServeHubError):
    """Payload cannot be canonically encoded (non-finite float, bad type)."""


class ValidationError(ServeHubError):
    """Input data violates a schema or an immutability rule."""


class AuthorizationError(ServeHubError):
    """Caller is authenticated but not allowed to perform the operation."""


class NotFound(ServeHubError):
    """Entity does not exist or is not visible to the caller."""


class QueryError(ServeHubError):
    """Search query is malformed (unknown field path, bad range)."""


# ---------------------------------------------------------------------------
# canonical payload encoding


def _check_payload(value: Any, depth: int = 0) -> None:
    if depth > 64:
        raise CanonicalizationError("payload nesting exceeds maximum depth")
    if value is None or isinstance(value, (bool, str, bytes)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        if not math.isfinite(value):
            raise CanonicalizationError(f"non-finite float {value!r} is not encodable")
        return
    if isinstance(value, list):
        for item in value:
            _check_payload(item, depth + 1)
        return
    if isinstance(value, dict):
        for key, item in value.items():
            if not isinstance(key, str):
                raise CanonicalizationError(f"record key {key!r} is not a string")
            if key == BYTES_TAG:
                raise CanonicalizationError(f"record key {BYTES_TAG!r} is reserved")
            _check_payload(item, depth + 1)
        return
    raise CanonicalizationError(f"unsupported payload type {type(value).__name__}")


def _tag_bytes(value: Any) -> Any:
    if isinstance(value, bytes):
        return {BYTES_TAG: base64.b64encode(value).decode("ascii")}
    if isinstance(value, list):
        return [_tag_bytes(v) for v in value]
    if isinstance(value, dict):
        return {k: _tag_bytes(v) for k, v in value.items()}
    return value


def _untag_bytes(value: Any) -> Any:
    if isinstance(value, list):
        return [_untag_bytes(v) for v in value]
    if isinstance(value, dict):
        if set(value.keys()) == {BYTES_TAG} and isinstance(value[BYTES_TAG], str):
            return base64.b64decode(value[BYTES_TAG])
        return {k: _untag_bytes(v) for k, v in value.items()}
    return value


def canonical_json(payload: Any) -> bytes:
    """Encode a payload value deterministically.

    Record keys are sorted by their UTF-8 bytes, there is no insignificant
    whitespace, floats use the shortest round-trip decimal form, and bytes
    become ``{"$bytes": "<base64>"}``. Structurally equal values always
    yield identical encodings; distinct values yield distinct encodings
    (floats are distinguished by bit pattern, so -0.0 differs from 0.0).
    """
    _check_payload(payload)
    # Code-point key order equals UTF-8 byte order, so sort_keys suffices.
    return json.dumps(
        _tag_bytes(payload),
        sort_keys=True,
        separators=(",", ":"),
        ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def _reject_nan(_: str) -> float:
    raise CanonicalizationError("non-finite float literal in payload")


def parse_canonical(data: bytes | str) -> Any:
    """Decode a canonical (or plain JSON) payload, restoring bytes values."""
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    try:
        raw = json.loads(data, parse_constant=_reject_nan)
    except json.JSONDecodeError as exc:
        raise CanonicalizationError(f"invalid payload JSON: {exc}") from exc
    return _untag_bytes(raw)


def payloads_equal(a: Any, b: Any) -> bool:
    """Structural equality over the payload value domain.

    Stricter than ``==`` where Python equates across types: bools never
    equal ints, ints never equal floats, and floats compare by bit pattern
    (NaN equals NaN, -0.0 differs from 0.0).
    """
    if isinstance(a, bool) or isinstance(b, bool):
        return type(a) is type(b) and a == b
    if isinstance(a, float) or isinstance(b, float):
        if not (isinstance(a, float) and isinstance(b, float)):
            return False
        return struct.pack("<d", a) == struct.pack("<d", b)
    if isinstance(a, list) and isinstance(b, list):
        return len(a) == len(b) and all(payloads_equal(x, y) for x, y in zip(a, b))
    if isinstance(a, dict) and isinstance(b, dict):
        return a.keys() == b.keys() and all(payloads_equal(v, b[k]) for k, v in a.items())
    return type(a) is type(b) and a == b


# ---------------------------------------------------------------------------
# identifiers and schemas


@dataclass(frozen=True, order=True)
class ServableId:
    """Identity of a published servable, rendered as ``namespace/name:version``."""

    namespace: str
    name: str
    version: int

    def __post_init__(self) -> None:
        if not _NAME_RE.match(self.namespace):
            raise ValidationError(f"invalid namespace {self.namespace!r}")
        if not _NAME_RE.match(self.name):
            raise ValidationError(f"invalid name {self.name!r}")
        if not isinstance(self.version, int) or isinstance(self.version, bool) or self.version < 1:
            raise ValidationError(f"version must be a positive integer, got {self.version!r}")

    def render(self) -> str:
        return f"{self.namespace}/{self.name}:{self.version}"

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str) -> "ServableId":
        m = _ID_RE.match(text)
        if not m:
            raise ValidationError(f"invalid servable id {text!r}")
        return cls(m.group(1), m.group(2), int(m.group(3)))


_SCALAR_KINDS = frozenset({"null", "boolean", "integer", "float", "string", "bytes"})


@dataclass(frozen=True)
class TypeDescriptor:
    """Shape of a payload value: a scalar kind, a list, or a named record."""

    kind: str
    item: "TypeDescriptor | None" = None
    fields: "tuple[tuple[str, TypeDescriptor], ...] | None" = None

    def __post_init__(self) -> None:
        if self.kind in _SCALAR_KINDS:
            if self.item is not None or self.fields is not None:
                raise ValidationError(f"scalar kind {self.kind!r} takes no item/fields")
        elif self.kind == "list":
            if self.item is None or self.fields is not None:
                raise ValidationError("list kind requires exactly an item descriptor")
        elif self.kind == "record":
            if self.fields is None or self.item is not None:
                raise ValidationError("record kind requires exactly a fields mapping")
            names = [n for n, _ in self.fields]
            if len(names) != len(set(names)):
                raise ValidationError("record field names must be unique")
        else:
            raise ValidationError(f"unknown type kind {self.kind!r}")

    @classmethod
    def scalar(cls, kind: str) -> "TypeDescriptor":
        return cls(kind)

    @classmethod
    def list_of(cls, item: "TypeDescriptor") -> "TypeDescriptor":
        return cls("list", item=item)

    @classmethod
    def record(cls, fields: dict[str, "TypeDescriptor"]) -> "TypeDescriptor":
        return cls("record", fields=tuple(sorted(fields.items())))

    def field_map(self) -> dict[str, "TypeDescriptor"]:
        return dict(self.fields or ())

    def to_payload(self) -> Any:
        if self.kind == "list":
            assert self.item is not None
            return {"kind": "list", "item": self.item.to_payload()}
        if self.kind == "record":
            return {
                "kind": "record",
                "fields": {n: t.to_payload() for n, t in (self.fields or ())},
            }
        return {"kind": self.kind}

    @classmethod
    def from_payload(cls, raw: Any) -> "TypeDescriptor":
        if not isinstance(raw, dict) or "kind" not in raw:
            raise ValidationError(f"malformed type descriptor {raw!r}")
        kind = raw["kind"]
        if kind == "list":
            return cls.list_of(cls.from_payload(raw.get("item")))
        if kind == "record":
            fields = raw.get("fields")
            if not isinstance(fields, dict):
                raise ValidationError("record descriptor requires a fields object")
            return cls.record({n: cls.from_payload(t) for n, t in fields.items()})
        return cls.scalar(kind)


@dataclass(frozen=True)
class Conformance:
    """Outcome of validating a payload against a descriptor.

    ``path`` names the first violating location, e.g. ``inputs[3].field_x``;
    the root itself is ``$``.
    """

    ok: bool
    path: str = ""
    message: str = ""

    def __bool__(self) -> bool:
        return self.ok


_OK = Conformance(True)


def _join(path: str, segment: str) -> str:
    return f"{path}.{segment}" if path else segment


def _violation(path: str, message: str) -> Conformance:
    return Conformance(False, path or "$", message)


def validate(payload: Any, schema: TypeDescriptor, path: str = "") -> Conformance:
    """Check a payload value against a descriptor, reporting the first violation."""
    kind = schema.kind
    if kind == "null":
        return _OK if payload is None else _violation(path, "expected null")
    if kind == "boolean":
        return _OK if isinstance(payload, bool) else _violation(path, "expected boolean")
    if kind == "integer":
        if isinstance(payload, int) and not isinstance(payload, bool):
            return _OK
        return _violation(path, "expected integer")
    if kind == "float":
        if isinstance(payload, (int, float)) and not isinstance(payload, bool):
            return _OK
        return _violation(path, "expected float")
    if kind == "string":
        return _OK if isinstance(payload, str) else _violation(path, "expected string")
    if kind == "bytes":
        return _OK if isinstance(payload, bytes) else _violation(path, "expected bytes")
    if kind == "list":
        if not isinstance(payload, list):
            return _violation(path, "expected list")
        assert schema.item is not None
        for i, item in enumerate(payload):
            report = validate(item, schema.item, f"{path}[{i}]")
            if not report:
                return report
        return _OK
    if kind == "record":
        if not isinstance(payload, dict):
            return _violation(path, "expected record")
        declared = schema.field_map()
        for name in declared:
            if name not in payload:
                return _violation(_join(path, name), "missing required field")
        for name in payload:
            if name not in declared:
                return _violation(_join(path, name), "unexpected field")
        for name, sub in declared.items():
            report = validate(payload[name], sub, _join(path, name))
            if not report:
                return report
        return _OK
    raise ValidationError(f"unknown type kind {kind!r}")


def accepts(producer: TypeDescriptor, consumer: TypeDescriptor) -> bool:
    """True when every value conforming to ``producer`` also conforms to ``consumer``."""
    if consumer.kind == "float" and producer.kind in ("integer", "float"):
        return True
    if producer.kind != consumer.kind:
        return False
    if producer.kind == "list":
        assert producer.item is not None and consumer.item is not None
        return accepts(producer.item, consumer.item)
    if producer.kind == "record":
        pf, cf = producer.field_map(), consumer.field_map()
        if pf.keys() != cf.keys():
            return False
        return all(accepts(pf[n], cf[n]) for n in pf)
    return True


# ---------------------------------------------------------------------------
# servable metadata


@dataclass(frozen=True)
class Visibility:
    """Who may discover and invoke a servable."""

    kind: str  # "public" | "private" | "group"
    members: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.kind not in ("public", "private", "group"):
            raise ValidationError(f"unknown visibility kind {self.kind!r}")
        if self.kind != "group" and self.members:
            raise ValidationError("only group visibility carries members")

    def allows(self, requester: str, owner: str) -> bool:
        if requester == owner or self.kind == "public":
            return True
        if self.kind == "group":
            return requester in self.members
        return False

    def to_payload(self) -> Any:
        if self.kind == "group":
            return {"kind": "group", "members": list(self.members)}
        return {"kind": self.kind}

    @classmethod
    def from_payload(cls, raw: Any) -> "Visibility":
        if not isinstance(raw, dict) or "kind" not in raw:
            raise ValidationError(f"malformed visibility {raw!r}")
        if raw["kind"] == "group":
            members = raw.get("members", [])
            if not isinstance(members, list) or not all(isinstance(m, str) for m in members):
                raise ValidationError("group members must be strings")
            return cls("group", tuple(members))
        return cls(raw["kind"])

    @classmethod
    def public(cls) -> "Visibility":
        return cls("public")

    @classmethod
    def private(cls) -> "Visibility":
        return cls("private")

    @classmethod
    def group(cls, members: list[str] | tuple[str, ...]) -> "Visibility":
        return cls("group", tuple(members))


def _utc_seconds(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc).replace(microsecond=0)


@dataclass(frozen=True)
class ServableMetadata:
    """Publication metadata attached to every servable version."""

    id: ServableId
    title: str
    description: str
    authors: tuple[str, ...]
    created: datetime
    model_type: str
    input_schema: TypeDescriptor
    output_schema: TypeDescriptor
    tags: tuple[str, ...] = ()
    visibility: Visibility = field(default_factory=Visibility.public)

    def __post_init__(self) -> None:
        if not self.title:
            raise ValidationError("title must be non-empty")
        if not self.authors:
            raise ValidationError("authors must be non-empty")
        object.__setattr__(self, "created", _utc_seconds(self.created))

    def to_payload(self) -> Any:
        return {
            "id": self.id.render(),
            "title": self.title,
            "description": self.description,
            "authors": list(self.authors),
            "created": int(self.created.timestamp()),
            "model_type": self.model_type,
            "input_schema": self.input_schema.to_payload(),
            "output_schema": self.output_schema.to_payload(),
            "tags": list(self.tags),
            "visibility": self.visibility.to_payload(),
        }

    @classmethod
    def from_payload(cls, raw: Any) -> "ServableMetadata":
        try:
            return cls(
                id=ServableId.parse(raw["id"]),
                title=raw["title"],
                description=raw.get("description", ""),
                authors=tuple(raw["authors"]),
                created=datetime.fromtimestamp(raw["created"], tz=timezone.utc),
                model_type=raw.get("model_type", "function"),
                input_schema=TypeDescriptor.from_payload(raw["input_schema"]),
                output_schema=TypeDescriptor.from_payload(raw["output_schema"]),
                tags=tuple(raw.get("tags", ())),
                visibility=Visibility.from_payload(raw.get("visibility", {"kind": "public"})),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed servable metadata: {exc}") from exc


@dataclass(frozen=True)
class Entrypoint:
    """Command that starts one worker process, resolved inside the package dir."""

    command: str
    args: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.command:
            raise ValidationError("entrypoint command must be non-empty")

    def to_payload(self) -> Any:
        return {"command": self.command, "args": list(self.args)}

    @classmethod
    def from_payload(cls, raw: Any) -> "Entrypoint":
        if not isinstance(raw, dict) or not raw.get("command"):
            raise ValidationError(f"malformed entrypoint {raw!r}")
        return cls(raw["command"], tuple(raw.get("args", ())))


STATES = ("pending", "ready", "offline")


@dataclass(frozen=True)
class ServableRecord:
    """A published servable: metadata plus package location and serving state."""

    metadata: ServableMetadata
    package_digest: str
    entrypoint: Entrypoint
    replicas_default: int = 1
    state: str = "pending"
    owner: str = ""
    diagnostic: str | None = None

    def __post_init__(self) -> None:
        if self.state not in STATES:
            raise ValidationError(f"unknown servable state {self.state!r}")
        if self.replicas_default < 1:
            raise ValidationError("replicas_default must be positive")

    @property
    def id(self) -> ServableId:
        return self.metadata.id

    def to_payload(self) -> Any:
        payload = {
            "metadata": self.metadata.to_payload(),
            "package_digest": self.package_digest,
            "entrypoint": self.entrypoint.to_payload(),
            "replicas_default": self.replicas_default,
            "state": self.state,
            "owner": self.owner,
        }
        if self.diagnostic is not None:
            payload["diagnostic"] = self.diagnostic
        return payload

    @classmethod
    def from_payload(cls, raw: Any) -> "ServableRecord":
        try:
            return cls(
                metadata=ServableMetadata.from_payload(raw["metadata"]),
                package_digest=raw["package_digest"],
                entrypoint=Entrypoint.from_payload(raw["entrypoint"]),
                replicas_default=raw.get("replicas_default", 1),
                state=raw["state"],
                owner=raw["owner"],
                diagnostic=raw.get("diagnostic"),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed servable record: {exc}") from exc


# ---------------------------------------------------------------------------
# tasks and timings


@dataclass(frozen=True)
class Timings:
    """The three nested latency metrics, in milliseconds.

    ``inference_ms`` is measured by the worker around the model call,
    ``invocation_ms`` by the Task Manager around the executor call, and
    ``request_ms`` by the Management Service from receipt to assembly.
    For a completed non-cached task each outer interval contains the inner
    one, so inference <= invocation <= request.
    """

    inference_ms: float = 0.0
    invocation_ms: float = 0.0
    request_ms: float = 0.0

    def __post_init__(self) -> None:
        for name in ("inference_ms", "invocation_ms", "request_ms"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")

    def nested(self) -> bool:
        return self.inference_ms <= self.invocation_ms <= self.request_ms

    def to_payload(self) -> Any:
        return {
            "inference_ms": self.inference_ms,
            "invocation_ms": self.invocation_ms,
            "request_ms": self.request_ms,
        }

    @classmethod
    def from_payload(cls, raw: Any) -> "Timings":
        return cls(
            inference_ms=float(raw["inference_ms"]),
            invocation_ms=float(raw["invocation_ms"]),
            request_ms=float(raw["request_ms"]),
        )


@dataclass(frozen=True)
class TaskError:
    code: str
    message: str

    def to_payload(self) -> Any:
        return {"code": self.code, "message": self.message}

    @classmethod
    def from_payload(cls, raw: Any) -> "TaskError":
        return cls(raw["code"], raw["message"])


TASK_STATUSES = ("pending", "running", "succeeded", "failed")


@dataclass(frozen=True)
class TaskRequest:
    """One invocation of a servable with a batch of inputs."""

    task_id: UUID
    servable: ServableId
    inputs: tuple[Any, ...]
    async_mode: bool = False
    requester: str = ""
    submitted_wall: float = 0.0
    submitted_mono: float = 0.0

    def __post_init__(self) -> None:
        if len(self.inputs) < 1:
            raise ValidationError("a task requires at least one input")


@dataclass(frozen=True)
class TaskResult:
    """Status snapshot and, once finished, the outcome of a task."""

    task_id: UUID
    status: str
    outputs: tuple[Any, ...] | None = None
    error: TaskError | None = None
    timings: Timings = field(default_factory=Timings)
    cache_hit: bool = False
    step_timings: tuple[Timings, ...] | None = None

    def __post_init__(self) -> None:
        if self.status not in TASK_STATUSES:
            raise ValidationError(f"unknown task status {self.status!r}")
        if self.status == "succeeded" and (self.outputs is None or self.error is not None):
            raise ValidationError("succeeded tasks carry outputs and no error")
        if self.status == "failed" and (self.error is None or self.outputs is not None):
            raise ValidationError("failed tasks carry an error and no outputs")

    def to_payload(self) -> Any:
        payload: dict[str, Any] = {
            "task_id": str(self.task_id),
            "status": self.status,
            "timings": self.timings.to_payload(),
            "cache_hit": self.cache_hit,
        }
        if self.outputs is not None:
            payload["outputs"] = list(self.outputs)
        if self.error is not None:
            payload["error"] = self.error.to_payload()
        if self.step_timings is not None:
            payload["step_timings"] = [t.to_payload() for t in self.step_timings]
        return payload

    @classmethod
    def from_payload(cls, raw: Any) -> "TaskResult":
        return cls(
            task_id=UUID(raw["task_id"]),
            status=raw["status"],
            outputs=tuple(raw["outputs"]) if "outputs" in raw else None,
            error=TaskError.from_payload(raw["error"]) if "error" in raw else None,
            timings=Timings.from_payload(raw["timings"]),
            cache_hit=raw.get("cache_hit", False),
            step_timings=tuple(Timings.from_payload(t) for t in raw["step_timings"])
            if "step_timings" in raw
            else None,
        )

