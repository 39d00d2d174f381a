"""Repository behavior: publish, search, visibility, crash safety."""

from __future__ import annotations

import itertools
import threading
import time

import pytest

from servehub.domain import (
    AuthorizationError,
    Entrypoint,
    NotFound,
    QueryError,
    ServableId,
    TypeDescriptor,
    ValidationError,
    Visibility,
)
from servehub.packages import archive_digest, build_files_archive
from servehub.repository import (
    FieldFilter,
    MetadataDraft,
    RangeFilter,
    Repository,
    SearchQuery,
)

SCRIPT = b"#!/bin/sh\necho hi\n"


def draft(
    namespace="alice",
    name="noop",
    title="A noop servable",
    description="returns hello world",
    tags=(),
    visibility=None,
    model_type="function",
):
    return MetadataDraft(
        namespace=namespace,
        name=name,
        title=title,
        description=description,
        authors=(namespace,),
        model_type=model_type,
        input_schema=TypeDescriptor.scalar("null"),
        output_schema=TypeDescriptor.scalar("string"),
        tags=tuple(tags),
        visibility=visibility or Visibility.public(),
    )


def shell_package(extra_name: str | None = None) -> bytes:
    files = {"run.sh": (SCRIPT, 0o755)}
    if extra_name:
        files[extra_name] = (b"data", 0o644)
    return build_files_archive(files)


ENTRY = Entrypoint("run.sh")


@pytest.fixture
def repo(tmp_path):
    return Repository(tmp_path / "repo")


class TestPublish:
    def test_first_publish_is_version_one_and_ready(self, repo):
        record = repo.publish(draft(), shell_package(), ENTRY, "alice")
        assert record.id == ServableId("alice", "noop", 1)
        assert record.state == "ready"
        assert record.diagnostic is None

    def test_second_publish_increments_version_and_keeps_old(self, repo):
        first = repo.publish(draft(), shell_package(), ENTRY, "alice")
        second = repo.publish(draft(), shell_package("v2-extra"), ENTRY, "alice")
        assert second.id.version == 2
        assert repo.get(first.id, "alice") == first
        assert repo.get(second.id, "alice") == second

    def test_missing_entrypoint_leaves_pending_with_diagnostic(self, repo):
        package = build_files_archive({"other.sh": (SCRIPT, 0o755)})
        record = repo.publish(draft(), package, ENTRY, "alice")
        assert record.state == "pending"
        assert "run.sh" in record.diagnostic

    def test_non_executable_entrypoint_diagnosed(self, repo):
        package = build_files_archive({"run.sh": (SCRIPT, 0o644)})
        record = repo.publish(draft(), package, ENTRY, "alice")
        assert record.state == "pending"
        assert "not executable" in record.diagnostic

    def test_foreign_namespace_rejected(self, repo):
        with pytest.raises(AuthorizationError):
            repo.publish(draft(namespace="alice"), shell_package(), ENTRY, "bob")

    def test_empty_package_rejected(self, repo):
        with pytest.raises(ValidationError):
            repo.publish(draft(), b"", ENTRY, "alice")

    def test_content_addressed_dedup(self, repo):
        package = shell_package()
        repo.publish(draft(name="one"), package, ENTRY, "alice")
        repo.publish(draft(name="two"), package, ENTRY, "alice")
        assert repo.blob_count() == 1
        repo.publish(draft(name="three"), shell_package("unique"), ENTRY, "alice")
        assert repo.blob_count() == 2

    def test_concurrent_same_name_publishes_get_distinct_versions(self, repo):
        versions = []
        errors = []

        def worker():
            try:
                record = repo.publish(draft(), shell_package(), ENTRY, "alice")
                versions.append(record.id.version)
            except Exception as exc:  # pragma: no cover
                errors.append(exc)

        threads = [threading.Thread(target=worker) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        assert sorted(versions) == list(range(1, 9))


class TestFetchPackage:
    def test_digest_round_trip_over_random_packages(self, repo):
        for i in range(10):
            package = shell_package(f"file-{i}")
            record = repo.publish(draft(name=f"pkg{i}"), package, ENTRY, "alice")
            fetched = repo.fetch_package(record.package_digest)
            assert archive_digest(fetched) == record.package_digest
            assert fetched == package

    def test_unknown_digest_not_found(self, repo):
        with pytest.raises(NotFound):
            repo.fetch_package("f" * 64)


class TestGetAndUpdate:
    def test_get_unpublished_not_found(self, repo):
        with pytest.raises(NotFound):
            repo.get(ServableId("alice", "ghost", 1), "alice")

    def test_private_record_indistinguishable_for_stranger(self, repo):
        record = repo.publish(draft(visibility=Visibility.private()), shell_package(), ENTRY, "alice")
        with pytest.raises(NotFound):
            repo.get(record.id, "bob")
        assert repo.get(record.id, "alice") == record

    def test_update_mutable_fields(self, repo):
        record = repo.publish(draft(), shell_package(), ENTRY, "alice")
        updated = repo.update_metadata(
            record.id, {"title": "renamed", "tags": ["vision"]}, "alice"
        )
        assert updated.metadata.title == "renamed"
        assert updated.metadata.tags == ("vision",)
        assert updated.package_digest == record.package_digest
        assert repo.get(record.id, "alice").metadata.title == "renamed"

    def test_update_immutable_field_rejected(self, repo):
        record = repo.publish(draft(), shell_package(), ENTRY, "alice")
        for field in ("entrypoint", "package_digest", "id", "model_type", "created"):
            with pytest.raises(ValidationError):
                repo.update_metadata(record.id, {field: "nope"}, "alice")

    def test_update_by_non_owner_rejected(self, repo):
        record = repo.publish(draft(), shell_package(), ENTRY, "alice")
        with pytest.raises(AuthorizationError):
            repo.update_metadata(record.id, {"title": "hijack"}, "bob")

    def test_visibility_update_changes_search_exposure(self, repo):
        record = repo.publish(draft(visibility=Visibility.private()), shell_package(), ENTRY, "alice")
        stranger = SearchQuery(requester="bob")
        assert repo.search(stranger) == []
        repo.update_metadata(record.id, {"visibility": {"kind": "public"}}, "alice")
        assert [r.id for r in repo.search(stranger)] == [record.id]


class TestSearch:
    def test_free_text_matches_description(self, repo):
        repo.publish(draft(name="cifar10", description="classifies CIFAR-10 images"), shell_package(), ENTRY, "alice")
        repo.publish(draft(name="noop"), shell_package("n"), ENTRY, "alice")
        results = repo.search(SearchQuery(requester="bob", free_text="cifar"))
        assert [r.id.name for r in results] == ["cifar10"]

    def test_relevance_orders_by_matched_term_count(self, repo):
        repo.publish(
            draft(name="both", title="deep vision model", description="vision transformer"),
            shell_package("a"), ENTRY, "alice",
        )
        time.sleep(1.1)  # distinct created timestamps at seconds resolution
        repo.publish(
            draft(name="one", title="vision only"), shell_package("b"), ENTRY, "alice"
        )
        results = repo.search(SearchQuery(requester="bob", free_text="vision transformer"))
        assert [r.id.name for r in results] == ["both", "one"]

    def test_newest_first_on_equal_relevance(self, repo):
        repo.publish(draft(name="old"), shell_package("a"), ENTRY, "alice")
        time.sleep(1.1)
        repo.publish(draft(name="new"), shell_package("b"), ENTRY, "alice")
        results = repo.search(SearchQuery(requester="bob"))
        assert [r.id.name for r in results] == ["new", "old"]

    def test_prefix_filter(self, repo):
        repo.publish(draft(name="alpha", model_type="keras"), shell_package("a"), ENTRY, "alice")
        repo.publish(draft(name="beta", model_type="sklearn"), shell_package("b"), ENTRY, "alice")
        results = repo.search(
            SearchQuery(
                requester="bob",
                field_filters=(FieldFilter("metadata.model_type", "ker", "prefix"),),
            )
        )
        assert [r.id.name for r in results] == ["alpha"]

    def test_exact_filter_on_tags(self, repo):
        repo.publish(draft(name="tagged", tags=["vision", "cnn"]), shell_package("a"), ENTRY, "alice")
        repo.publish(draft(name="plain"), shell_package("b"), ENTRY, "alice")
        results = repo.search(
            SearchQuery(requester="bob", field_filters=(FieldFilter("metadata.tags", "cnn", "exact"),))
        )
        assert [r.id.name for r in results] == ["tagged"]

    def test_range_filter_matches_brute_force(self, repo):
        # 20 records with known version numbers; compare against a brute filter
        for _ in range(20):
            repo.publish(draft(name="versioned"), shell_package(), ENTRY, "alice")
        low, high = 5, 13
        results = repo.search(
            SearchQuery(
                requester="bob",
                range_filters=(RangeFilter("metadata.id.version", low, high),),
                limit=50,
            )
        )
        expected = {
            r.id for r in repo.all_records() if low <= r.id.version <= high
        }
        assert {r.id for r in results} == expected
        assert len(expected) == high - low + 1

    def test_created_range_filter(self, repo):
        record = repo.publish(draft(name="timed"), shell_package(), ENTRY, "alice")
        created = record.metadata.created.timestamp()
        hit = repo.search(
            SearchQuery(requester="bob", range_filters=(RangeFilter("metadata.created", created - 1, created + 1),))
        )
        miss = repo.search(
            SearchQuery(requester="bob", range_filters=(RangeFilter("metadata.created", created + 10, None),))
        )
        assert [r.id for r in hit] == [record.id]
        assert miss == []

    def test_malformed_field_path_raises(self, repo):
        with pytest.raises(QueryError):
            repo.search(SearchQuery(requester="bob", field_filters=(FieldFilter("bogus.path", "x"),)))
        with pytest.raises(QueryError):
            repo.search(SearchQuery(requester="bob", range_filters=(RangeFilter("metadata.title", 0, 1),)))

    def test_limit_applies_after_ranking(self, repo):
        for i in range(5):
            repo.publish(draft(name=f"s{i}"), shell_package(str(i)), ENTRY, "alice")
        assert len(repo.search(SearchQuery(requester="bob", limit=3))) == 3

    def test_determinism(self, repo):
        for i in range(6):
            repo.publish(draft(name=f"d{i}", tags=["x"]), shell_package(str(i)), ENTRY, "alice")
        q = SearchQuery(requester="bob", free_text="x")
        assert repo.search(q) == repo.search(q)


class TestVisibilityMatrix:
    def test_exhaustive_visibility_soundness(self, repo):
        """Every (record, requester) pair appears in search iff visibility allows."""
        requesters = ["alice", "bob", "carol", "dave"]
        visibilities = {
            "pub": Visibility.public(),
            "priv": Visibility.private(),
            "grp": Visibility.group(["bob", "carol"]),
        }
        records = {}
        for label, vis in visibilities.items():
            records[label] = repo.publish(
                draft(name=f"vis-{label}", visibility=vis), shell_package(label), ENTRY, "alice"
            )

        def allowed(label: str, requester: str) -> bool:
            vis = visibilities[label]
            return vis.allows(requester, "alice")

        for requester, label in itertools.product(requesters, visibilities):
            visible_ids = {r.id for r in repo.search(SearchQuery(requester=requester))}
            assert (records[label].id in visible_ids) == allowed(label, requester), (
                f"visibility {label} requester {requester}"
            )
            # get must agree with search
            if allowed(label, requester):
                assert repo.get(records[label].id, requester)
            else:
                with pytest.raises(NotFound):
                    repo.get(records[label].id, requester)


ABORT_POINTS = [
    "publish:start",
    "version:after-assign",
    "blob:before-tmp",
    "blob:partial-write",
    "blob:after-tmp",
    "blob:before-rename",
    "blob:after-rename",
    "build:before-check",
    "build:after-check",
    "record:before-tmp",
    "record:partial-write",
    "record:after-tmp",
    "record:before-rename",
    "record:after-rename",
    "index:before-append",
    "index:partial-append",
    "index:after-append",
    "memory:before-update",
    "memory:after-update",
    "publish:end",
]


class _InjectedAbort(BaseException):
    """Bypasses ordinary exception handling, like a real crash."""


class TestCrashSafety:
    def test_abort_point_list_is_complete(self, tmp_path):
        seen: list[str] = []
        repo = Repository(tmp_path / "probe")
        repo._abort_hook = seen.append
        repo.publish(draft(), shell_package(), ENTRY, "alice")
        assert set(seen) == set(ABORT_POINTS)

    @pytest.mark.parametrize("abort_at", ABORT_POINTS)
    def test_interrupted_publish_leaves_consistent_state(self, tmp_path, abort_at):
        root = tmp_path / "crash"
        repo = Repository(root)
        repo.publish(draft(name="pre"), shell_package("pre"), ENTRY, "alice")

        def hook(point: str) -> None:
            if point == abort_at:
                raise _InjectedAbort(point)

        repo._abort_hook = hook
        with pytest.raises(_InjectedAbort):
            repo.publish(draft(name="victim"), shell_package("victim"), ENTRY, "alice")

        # restart from disk: index must be consistent, record absent or complete
        reopened = Repository(root)
        assert reopened.get(ServableId("alice", "pre", 1), "alice").state == "ready"
        victims = [r for r in reopened.all_records() if r.id.name == "victim"]
        assert len(victims) <= 1
        for record in victims:
            assert record.state in ("ready", "pending")
            assert reopened.fetch_package(record.package_digest)

        # the store still accepts new publishes with a sane version
        after = reopened.publish(draft(name="victim"), shell_package("after"), ENTRY, "alice")
        assert after.id.version == len(victims) + 1

    def test_reopen_preserves_records(self, tmp_path):
        root = tmp_path / "persist"
        repo = Repository(root)
        a = repo.publish(draft(name="a"), shell_package("a"), ENTRY, "alice")
        b = repo.publish(draft(name="b", visibility=Visibility.private()), shell_package("b"), ENTRY, "alice")
        reopened = Repository(root)
        assert reopened.get(a.id, "bob") == a
        assert reopened.get(b.id, "alice") == b
        with pytest.raises(NotFound):
            reopened.get(b.id, "bob")
