"""Persistent store and search index for published servables.

Layout under the repository root:

    blobs/<sha256>.tar.gz            content-addressed package archives
    servables/<ns>/<name>/v<N>.json  one canonical-JSON record per version
    index.log                        append-only publish log, rebuilt on startup

Record files are the ground truth. They are written atomically (temp file
plus rename), so a crash mid-publish leaves either no record or a complete
one; the log is reconstructed from the record files on startup, which makes
a torn tail line harmless.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
import threading
import time
from collections import defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable

from servehub.domain import (
    AuthorizationError,
    Entrypoint,
    NotFound,
    QueryError,
    ServableId,
    ServableMetadata,
    ServableRecord,
    TypeDescriptor,
    ValidationError,
    Visibility,
    canonical_json,
    parse_canonical,
)
from servehub.packages import archive_digest, check_entrypoint, unpack_archive

__all__ = ["MetadataDraft", "FieldFilter", "RangeFilter", "SearchQuery", "Repository"]

_VERSION_FILE_RE = re.compile(r"^v([1-9][0-9]*)\.json$")

MUTABLE_FIELDS = frozenset({"title", "description", "tags", "visibility", "authors"})


@dataclass(frozen=True)
class MetadataDraft:
    """Publisher-supplied metadata; the repository assigns the version."""

    namespace: str
    name: str
    title: str
    description: str
    authors: tuple[str, ...]
    model_type: str
    input_schema: TypeDescriptor
    output_schema: TypeDescriptor
    tags: tuple[str, ...] = ()
    visibility: Visibility = field(default_factory=Visibility.public)

    def with_version(self, version: int, created: datetime) -> ServableMetadata:
        return ServableMetadata(
            id=ServableId(self.namespace, self.name, version),
            title=self.title,
            description=self.description,
            authors=self.authors,
            created=created,
            model_type=self.model_type,
            input_schema=self.input_schema,
            output_schema=self.output_schema,
            tags=self.tags,
            visibility=self.visibility,
        )

    @classmethod
    def from_payload(cls, raw: Any) -> "MetadataDraft":
        try:
            return cls(
                namespace=raw["namespace"],
                name=raw["name"],
                title=raw["title"],
                description=raw.get("description", ""),
                authors=tuple(raw["authors"]),
                model_type=raw.get("model_type", "function"),
                input_schema=TypeDescriptor.from_payload(raw["input_schema"]),
                output_schema=TypeDescriptor.from_payload(raw["output_schema"]),
                tags=tuple(raw.get("tags", ())),
                visibility=Visibility.from_payload(raw.get("visibility", {"kind": "public"})),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed metadata draft: {exc}") from exc


@dataclass(frozen=True)
class FieldFilter:
    path: str
    value: str
    match: str = "exact"  # "exact" | "prefix"


@dataclass(frozen=True)
class RangeFilter:
    path: str
    min: float | None = None
    max: float | None = None


@dataclass(frozen=True)
class SearchQuery:
    """Access-controlled query; with no criteria it lists everything visible."""

    requester: str
    free_text: str | None = None
    field_filters: tuple[FieldFilter, ...] = ()
    range_filters: tuple[RangeFilter, ...] = ()
    limit: int = 50

    def __post_init__(self) -> None:
        if self.limit < 1:
            raise QueryError("limit must be positive")


def _text_fields(record: ServableRecord) -> dict[str, str | list[str]]:
    md = record.metadata
    return {
        "owner": record.owner,
        "state": record.state,
        "package_digest": record.package_digest,
        "metadata.title": md.title,
        "metadata.description": md.description,
        "metadata.model_type": md.model_type,
        "metadata.id.namespace": md.id.namespace,
        "metadata.id.name": md.id.name,
        "metadata.tags": list(md.tags),
        "metadata.authors": list(md.authors),
    }


def _range_fields(record: ServableRecord) -> dict[str, float]:
    md = record.metadata
    return {
        "metadata.created": md.created.timestamp(),
        "metadata.id.version": float(md.id.version),
        "replicas_default": float(record.replicas_default),
    }


TEXT_PATHS = frozenset(
    {
        "owner",
        "state",
        "package_digest",
        "metadata.title",
        "metadata.description",
        "metadata.model_type",
        "metadata.id.namespace",
        "metadata.id.name",
        "metadata.tags",
        "metadata.authors",
    }
)

RANGE_PATHS = frozenset({"metadata.created", "metadata.id.version", "replicas_default"})


class Repository:
    """Thread-safe servable store; reads work on immutable snapshots."""

    def __init__(self, root: Path | str):
        self.root = Path(root)
        self._blobs = self.root / "blobs"
        self._servables = self.root / "servables"
        self._index_log = self.root / "index.log"
        self._blobs.mkdir(parents=True, exist_ok=True)
        self._servables.mkdir(parents=True, exist_ok=True)
        self._records: dict[ServableId, ServableRecord] = {}
        self._write_lock = threading.Lock()
        self._name_locks: dict[tuple[str, str], threading.Lock] = defaultdict(threading.Lock)
        # test hook: called with a named checkpoint during publish, may raise
        self._abort_hook: Callable[[str], None] | None = None
        self._rebuild()

    # -- startup ------------------------------------------------------------

    def _rebuild(self) -> None:
        records: dict[ServableId, ServableRecord] = {}
        for path in sorted(self._servables.glob("*/*/v*.json")):
            if not _VERSION_FILE_RE.match(path.name):
                continue
            try:
                record = ServableRecord.from_payload(parse_canonical(path.read_bytes()))
            except (ValidationError, ValueError):
                continue  # torn or foreign file; record files are written atomically
            records[record.id] = record
        self._records = records
        lines = [self._log_line("publish", r.id) for r in sorted(records.values(), key=lambda r: r.id)]
        tmp = self._index_log.with_suffix(".log.tmp")
        tmp.write_text("".join(lines), encoding="utf-8")
        os.replace(tmp, self._index_log)

    @staticmethod
    def _log_line(op: str, servable_id: ServableId) -> str:
        return json.dumps({"op": op, "id": servable_id.render()}, separators=(",", ":")) + "\n"

    def _checkpoint(self, name: str) -> None:
        if self._abort_hook is not None:
            self._abort_hook(name)

    # -- publish ------------------------------------------------------------

    def publish(
        self,
        draft: MetadataDraft,
        package: bytes,
        entrypoint: Entrypoint,
        owner: str,
        replicas_default: int = 1,
    ) -> ServableRecord:
        """Store a new version; the record lands ready, or pending with a diagnostic.

        The version is one more than the highest already on disk for the
        name. The caller must own the namespace (namespaces are user handles).
        """
        if not package:
            raise ValidationError("package archive is empty")
        if draft.namespace != owner:
            raise AuthorizationError(f"user {owner!r} may not publish into namespace {draft.namespace!r}")
        self._checkpoint("publish:start")

        with self._name_lock(draft.namespace, draft.name):
            version = self._next_version(draft.namespace, draft.name)
            self._checkpoint("version:after-assign")
            metadata = draft.with_version(version, datetime.now(tz=timezone.utc))
            digest = archive_digest(package)
            self._store_blob(digest, package)

            self._checkpoint("build:before-check")
            diagnostic = self._build_check(package, entrypoint)
            self._checkpoint("build:after-check")

            record = ServableRecord(
                metadata=metadata,
                package_digest=digest,
                entrypoint=entrypoint,
                replicas_default=replicas_default,
                state="pending" if diagnostic else "ready",
                owner=owner,
                diagnostic=diagnostic,
            )
            self._write_record(record)
            self._append_log("publish", record.id)
            self._checkpoint("memory:before-update")
            with self._write_lock:
                updated = dict(self._records)
                updated[record.id] = record
                self._records = updated
            self._checkpoint("memory:after-update")
        self._checkpoint("publish:end")
        return record

    def _name_lock(self, namespace: str, name: str) -> threading.Lock:
        with self._write_lock:
            return self._name_locks[(namespace, name)]

    def _next_version(self, namespace: str, name: str) -> int:
        highest = 0
        name_dir = self._servables / namespace / name
        if name_dir.is_dir():
            for entry in name_dir.iterdir():
                m = _VERSION_FILE_RE.match(entry.name)
                if m:
                    highest = max(highest, int(m.group(1)))
        return highest + 1

    def _store_blob(self, digest: str, package: bytes) -> None:
        blob_path = self._blobs / f"{digest}.tar.gz"
        if blob_path.exists():
            return  # content-addressed dedup
        self._checkpoint("blob:before-tmp")
        fd, tmp_name = tempfile.mkstemp(dir=self._blobs, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                half = len(package) // 2
                fh.write(package[:half])
                fh.flush()
                self._checkpoint("blob:partial-write")
                fh.write(package[half:])
                fh.flush()
                os.fsync(fh.fileno())
            self._checkpoint("blob:after-tmp")
            self._checkpoint("blob:before-rename")
            os.replace(tmp_name, blob_path)
        except Exception:
            # BaseException (crash-like aborts) must leave debris in place
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
        self._checkpoint("blob:after-rename")

    def _build_check(self, package: bytes, entrypoint: Entrypoint) -> str | None:
        with tempfile.TemporaryDirectory(prefix="servehub-build-") as tmp:
            try:
                unpack_archive(package, Path(tmp))
            except (ValidationError, OSError, EOFError) as exc:
                return f"package does not unpack: {exc}"
            return check_entrypoint(Path(tmp), entrypoint)

    def _write_record(self, record: ServableRecord) -> None:
        data = canonical_json(record.to_payload())
        target = self._servables / record.id.namespace / record.id.name / f"v{record.id.version}.json"
        target.parent.mkdir(parents=True, exist_ok=True)
        self._checkpoint("record:before-tmp")
        fd, tmp_name = tempfile.mkstemp(dir=target.parent, suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                half = len(data) // 2
                fh.write(data[:half])
                fh.flush()
                self._checkpoint("record:partial-write")
                fh.write(data[half:])
                fh.flush()
                os.fsync(fh.fileno())
            self._checkpoint("record:after-tmp")
            self._checkpoint("record:before-rename")
            os.replace(tmp_name, target)
        except Exception:
            if os.path.exists(tmp_name):
                os.unlink(tmp_name)
            raise
        self._checkpoint("record:after-rename")

    def _append_log(self, op: str, servable_id: ServableId) -> None:
        line = self._log_line(op, servable_id)
        self._checkpoint("index:before-append")
        with self._index_log.open("a", encoding="utf-8") as fh:
            half = len(line) // 2
            fh.write(line[:half])
            fh.flush()
            self._checkpoint("index:partial-append")
            fh.write(line[half:])
            fh.flush()
            os.fsync(fh.fileno())
        self._checkpoint("index:after-append")

    # -- retrieval ----------------------------------------------------------

    def get(self, servable_id: ServableId, requester: str) -> ServableRecord:
        """Fetch one record; missing and unauthorized are indistinguishable."""
        record = self._records.get(servable_id)
        if record is None or not record.metadata.visibility.allows(requester, record.owner):
            raise NotFound(f"servable {servable_id.render()} not found")
        return record

    def resolve(self, servable_id: ServableId) -> ServableRecord | None:
        """Visibility-blind lookup for trusted infrastructure paths (managers, pipelines)."""
        return self._records.get(servable_id)

    def fetch_package(self, digest: str) -> bytes:
        """Return archive bytes, verifying they still hash to the digest."""
        blob_path = self._blobs / f"{digest}.tar.gz"
        if not blob_path.is_file():
            raise NotFound(f"package {digest} not found")
        data = blob_path.read_bytes()
        if hashlib.sha256(data).hexdigest() != digest:
            raise ValidationError(f"stored package {digest} is corrupt")
        return data

    def update_metadata(self, servable_id: ServableId, patch: dict[str, Any], requester: str) -> ServableRecord:
        """Patch mutable metadata fields; identity and package fields never change."""
        record = self.get(servable_id, requester)
        if record.owner != requester:
            raise AuthorizationError(f"only {record.owner!r} may update {servable_id.render()}")
        unknown = set(patch) - MUTABLE_FIELDS
        if unknown:
            raise ValidationError(f"immutable or unknown fields in patch: {sorted(unknown)}")

        md = record.metadata
        updated_md = ServableMetadata(
            id=md.id,
            title=patch.get("title", md.title),
            description=patch.get("description", md.description),
            authors=tuple(patch["authors"]) if "authors" in patch else md.authors,
            created=md.created,
            model_type=md.model_type,
            input_schema=md.input_schema,
            output_schema=md.output_schema,
            tags=tuple(patch["tags"]) if "tags" in patch else md.tags,
            visibility=Visibility.from_payload(patch["visibility"])
            if "visibility" in patch
            else md.visibility,
        )
        updated = ServableRecord(
            metadata=updated_md,
            package_digest=record.package_digest,
            entrypoint=record.entrypoint,
            replicas_default=record.replicas_default,
            state=record.state,
            owner=record.owner,
            diagnostic=record.diagnostic,
        )
        with self._name_lock(servable_id.namespace, servable_id.name):
            self._write_record(updated)
            self._append_log("update", updated.id)
            with self._write_lock:
                snapshot = dict(self._records)
                snapshot[updated.id] = updated
                self._records = snapshot
        return updated

    # -- search ---------------------------------------------------------------

    def search(self, query: SearchQuery) -> list[ServableRecord]:
        """Rank visible records by matched free-text terms, newest first on ties."""
        for flt in query.field_filters:
            if flt.path not in TEXT_PATHS:
                raise QueryError(f"unknown field path {flt.path!r}")
            if flt.match not in ("exact", "prefix"):
                raise QueryError(f"unknown match mode {flt.match!r}")
        for rng in query.range_filters:
            if rng.path not in RANGE_PATHS:
                raise QueryError(f"unknown range field {rng.path!r}")

        terms = [t for t in (query.free_text or "").lower().split() if t]
        scored: list[tuple[int, float, str, ServableRecord]] = []
        for record in self._records.values():
            if not record.metadata.visibility.allows(query.requester, record.owner):
                continue
            if not self._passes_filters(record, query):
                continue
            score = 0
            if terms:
                haystack = self._haystack(record)
                score = sum(1 for t in terms if t in haystack)
                if score == 0:
                    continue
            scored.append((score, record.metadata.created.timestamp(), record.id.render(), record))

        scored.sort(key=lambda item: (-item[0], -item[1], item[2]))
        return [record for _, _, _, record in scored[: query.limit]]

    @staticmethod
    def _haystack(record: ServableRecord) -> str:
        md = record.metadata
        parts = [md.title, md.description, *md.tags, *md.authors]
        return "\n".join(parts).lower()

    @staticmethod
    def _passes_filters(record: ServableRecord, query: SearchQuery) -> bool:
        texts = _text_fields(record)
        for flt in query.field_filters:
            value = texts[flt.path]
            candidates = value if isinstance(value, list) else [value]
            if flt.match == "exact":
                if not any(c == flt.value for c in candidates):
                    return False
            else:
                if not any(c.startswith(flt.value) for c in candidates):
                    return False
        numbers = _range_fields(record)
        for rng in query.range_filters:
            value = numbers[rng.path]
            if rng.min is not None and value < rng.min:
                return False
            if rng.max is not None and value > rng.max:
                return False
        return True

    # -- accounting -----------------------------------------------------------

    def blob_count(self) -> int:
        return sum(1 for p in self._blobs.iterdir() if p.name.endswith(".tar.gz"))

    def all_records(self) -> list[ServableRecord]:
        return list(self._records.values())
