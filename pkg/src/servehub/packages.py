"""Servable package archives: build, digest, unpack, and entrypoint checks.

Packages travel as gzipped tarballs addressed by the SHA-256 hex digest of
the archive bytes. The entrypoint command must name a file inside the
package (e.g. ``worker.py``); workers that need an interpreter use a
shebang line rather than naming the interpreter as the command.
"""

from __future__ import annotations

import hashlib
import io
import os
import sys
import tarfile
from pathlib import Path

from servehub.domain import Entrypoint, ValidationError

__all__ = [
    "archive_digest",
    "build_archive",
    "build_worker_archive",
    "unpack_archive",
    "check_entrypoint",
    "SYNTHETIC_KINDS",
]


def archive_digest(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def build_archive(directory: Path, exclude: tuple[str, ...] = (".servehub",)) -> bytes:
    """Tar and gzip a directory, preserving file modes, excluding top-level names."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w:gz") as tar:
        for entry in sorted(directory.rglob("*")):
            rel = entry.relative_to(directory)
            if rel.parts and rel.parts[0] in exclude:
                continue
            tar.add(entry, arcname=str(rel), recursive=False)
    return buf.getvalue()


def build_files_archive(files: dict[str, tuple[bytes, int]]) -> bytes:
    """Build an archive from {path: (content, mode)} without touching disk."""
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode="w:gz") as tar:
        for name, (content, mode) in sorted(files.items()):
            info = tarfile.TarInfo(name=name)
            info.size = len(content)
            info.mode = mode
            info.mtime = 0
            tar.addfile(info, io.BytesIO(content))
    return buf.getvalue()


def unpack_archive(data: bytes, dest: Path) -> None:
    """Unpack a package archive, refusing entries that escape the target dir."""
    dest.mkdir(parents=True, exist_ok=True)
    with tarfile.open(fileobj=io.BytesIO(data), mode="r:gz") as tar:
        for member in tar.getmembers():
            target = dest / member.name
            if not target.resolve().is_relative_to(dest.resolve()):
                raise ValidationError(f"archive entry {member.name!r} escapes the package dir")
            if member.issym() or member.islnk():
                raise ValidationError(f"archive entry {member.name!r} is a link")
        tar.extractall(dest)


def check_entrypoint(package_dir: Path, entrypoint: Entrypoint) -> str | None:
    """Return a diagnostic when the entrypoint cannot run, None when it can."""
    target = package_dir / entrypoint.command
    if not target.is_file():
        return f"entrypoint file {entrypoint.command!r} not found in package"
    if not os.access(target, os.X_OK):
        return f"entrypoint file {entrypoint.command!r} is not executable"
    return None


_WORKER_SCRIPT = """\
#!{interpreter}
import sys

from servehub.workers import main

if __name__ == "__main__":
    main(sys.argv[1:])
"""

SYNTHETIC_KINDS = ("noop", "echo", "sleep", "spin")


def build_worker_archive(kind: str, *args: str, interpreter: str | None = None) -> tuple[bytes, Entrypoint]:
    """Package one of the built-in synthetic workers (noop, echo, sleep, spin).

    The archive holds a single executable ``worker.py`` whose shebang points
    at ``interpreter`` (defaults to the running Python, so locally published
    packages run against the same environment).
    """
    base = kind.split(":", 1)[0]
    if base not in SYNTHETIC_KINDS:
        raise ValidationError(f"unknown synthetic worker kind {kind!r}")
    script = _WORKER_SCRIPT.format(interpreter=interpreter or sys.executable)
    data = build_files_archive({"worker.py": (script.encode(), 0o755)})
    return data, Entrypoint("worker.py", (kind, *args))
