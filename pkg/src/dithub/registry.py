"""Persistent, versioned library of expert modules with a commit history.

Directory layout under the library root::

    manifest.json                      latest version per class + shared indices
    log.jsonl                          append-only commit log, one JSON object per line
    modules/<class_id>/<version>.ditm  expert factor blobs
    shared/<task_index>.ditm           shared projection blobs
    warmup/<seq>.ditm                  warmup factors kept for reproducibility

Blob format (bit-exact): magic ``DITM``, then little-endian u32 format
version, u32 rows, u32 cols, then rows*cols IEEE-754 float64 values,
little-endian, row-major.  Every blob's FNV-1a 64-bit hash is recorded in its
commit log entry and re-checked on read; a mismatch is reported as
:class:`CorruptModuleError`, distinct from plain absence.

Writes go through a temp file plus ``os.replace`` so a crash mid-commit never
exposes a partial module: a blob without a manifest update is invisible to
``fetch``.  Concurrency contract (documented, not enforced): one writer per
library directory; readers are safe with each other but not with an in-flight
commit.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from dithub import kernels
from dithub.lowrank import ExpertModule, SharedProjection, as_matrix, merge_expert

MAGIC = b"DITM"
BLOB_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
LOG_NAME = "log.jsonl"
MODULES_DIR = "modules"
SHARED_DIR = "shared"
WARMUP_DIR = "warmup"

KIND_EXPERT = "expert"
KIND_SHARED = "shared"
KIND_WARMUP = "warmup"


class RegistryError(Exception):
    """Base error for library operations."""


class CorruptModuleError(RegistryError):
    """A stored blob failed its content-hash check."""


class UnknownVersionError(RegistryError):
    """The requested class/version pair was never committed."""


@dataclass
class CommitRecord:
    seq: int
    kind: str
    class_id: str | None
    task_id: str
    version: int
    lambda_used: float | None
    parent_versions: list[int]
    content_hash: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "seq": self.seq,
                "kind": self.kind,
                "class_id": self.class_id,
                "task_id": self.task_id,
                "version": self.version,
                "lambda_used": self.lambda_used,
                "parent_versions": list(self.parent_versions),
                "content_hash": f"{self.content_hash:016x}",
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "CommitRecord":
        raw = json.loads(line)
        return cls(
            seq=raw["seq"],
            kind=raw["kind"],
            class_id=raw["class_id"],
            task_id=raw["task_id"],
            version=raw["version"],
            lambda_used=raw["lambda_used"],
            parent_versions=list(raw["parent_versions"]),
            content_hash=int(raw["content_hash"], 16),
        )


@dataclass
class WorkingCopy:
    """An uncommitted branch matrix plus the provenance a later commit needs."""

    class_id: str
    a: np.ndarray
    parent_version: int | None
    lambda_used: float | None


class ModuleLibrary:
    """In-memory handle on one library directory."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.manifest: dict[str, int] = {}
        self.shared_indices: list[int] = []
        self.records: list[CommitRecord] = []
        self._index: dict[tuple[str, str | None, int], CommitRecord] = {}

    @property
    def next_seq(self) -> int:
        return len(self.records) + 1

    def _remember(self, record: CommitRecord):
        self.records.append(record)
        self._index[(record.kind, record.class_id, record.version)] = record

    def record_for(self, kind: str, class_id: str | None, version: int) -> CommitRecord | None:
        return self._index.get((kind, class_id, version))


def encode_matrix(m: np.ndarray) -> bytes:
    m = as_matrix(m)
    header = MAGIC + struct.pack("<III", BLOB_FORMAT_VERSION, m.shape[0], m.shape[1])
    return header + np.ascontiguousarray(m, dtype="<f8").tobytes()


def decode_matrix(blob: bytes) -> np.ndarray:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise CorruptModuleError("blob does not start with the DITM magic bytes")
    version, rows, cols = struct.unpack("<III", blob[4:16])
    if version != BLOB_FORMAT_VERSION:
        raise CorruptModuleError(f"unsupported blob format version {version}")
    expected = 16 + rows * cols * 8
    if len(blob) != expected:
        raise CorruptModuleError(f"blob is {len(blob)} bytes, expected {expected}")
    data = np.frombuffer(blob[16:], dtype="<f8").astype(np.float64)
    return data.reshape(rows, cols)


def _post_blob_write(path: Path):
    """Fault-injection seam: called after the temp blob is written, before rename."""


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    _post_blob_write(tmp)
    os.replace(tmp, path)


def _manifest_path(lib: ModuleLibrary) -> Path:
    return lib.root / MANIFEST_NAME


def _log_path(lib: ModuleLibrary) -> Path:
    return lib.root / LOG_NAME


def _save_manifest(lib: ModuleLibrary):
    doc = {"classes": dict(sorted(lib.manifest.items())), "shared": sorted(lib.shared_indices)}
    payload = json.dumps(doc, indent=2, sort_keys=True).encode("utf-8") + b"\n"
    tmp = _manifest_path(lib).with_name(MANIFEST_NAME + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, _manifest_path(lib))


def _append_log(lib: ModuleLibrary, record: CommitRecord):
    with open(_log_path(lib), "a", encoding="utf-8") as fh:
        fh.write(record.to_json() + "\n")
        fh.flush()


def init_library(path) -> ModuleLibrary:
    """Create the directory layout and an empty manifest.

    Fails if the path exists and is non-empty; an existing empty directory is
    initialized in place.
    """
    root = Path(path)
    if root.exists():
        if not root.is_dir():
            raise FileExistsError(f"{root} exists and is not a directory")
        if any(root.iterdir()):
            raise FileExistsError(f"{root} exists and is not empty")
    root.mkdir(parents=True, exist_ok=True)
    for sub in (MODULES_DIR, SHARED_DIR, WARMUP_DIR):
        (root / sub).mkdir()
    lib = ModuleLibrary(root)
    _save_manifest(lib)
    (root / LOG_NAME).touch()
    return lib


def open_library(path) -> ModuleLibrary:
    """Load an existing library's manifest and commit log."""
    root = Path(path)
    manifest_file = root / MANIFEST_NAME
    if not manifest_file.is_file():
        raise RegistryError(f"{root} is not a module library (missing {MANIFEST_NAME})")
    lib = ModuleLibrary(root)
    doc = json.loads(manifest_file.read_text(encoding="utf-8"))
    lib.manifest = {str(k): int(v) for k, v in doc.get("classes", {}).items()}
    lib.shared_indices = [int(i) for i in doc.get("shared", [])]
    log_file = root / LOG_NAME
    if log_file.is_file():
        last_seq = 0
        for line in log_file.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            record = CommitRecord.from_json(line)
            if record.seq <= last_seq:
                raise RegistryError(f"commit log is not seq-monotone at seq {record.seq}")
            last_seq = record.seq
            lib._remember(record)
    return lib


def _blob_path(lib: ModuleLibrary, kind: str, class_id: str | None, version: int) -> Path:
    if kind == KIND_EXPERT:
        return lib.root / MODULES_DIR / class_id / f"{version}.ditm"
    if kind == KIND_SHARED:
        return lib.root / SHARED_DIR / f"{version}.ditm"
    return lib.root / WARMUP_DIR / f"{version}.ditm"


def _read_verified(lib: ModuleLibrary, kind: str, class_id: str | None, version: int) -> np.ndarray:
    path = _blob_path(lib, kind, class_id, version)
    if not path.is_file():
        raise UnknownVersionError(f"no stored blob for {kind} {class_id!r} version {version}")
    blob = path.read_bytes()
    record = lib.record_for(kind, class_id, version)
    if record is None:
        raise UnknownVersionError(f"no commit record for {kind} {class_id!r} version {version}")
    if kernels.fnv1a64(blob) != record.content_hash:
        raise CorruptModuleError(
            f"content hash mismatch for {kind} {class_id!r} version {version}: blob bytes differ from commit"
        )
    return decode_matrix(blob)


def fetch(lib: ModuleLibrary, class_id: str) -> ExpertModule | None:
    """Latest committed expert for a class, or None if the class is unseen."""
    version = lib.manifest.get(class_id)
    if version is None:
        return None
    a = _read_verified(lib, KIND_EXPERT, class_id, version)
    record = lib.record_for(KIND_EXPERT, class_id, version)
    parent = record.parent_versions[0] if record.parent_versions else None
    return ExpertModule(
        class_id=class_id,
        a=a,
        version=version,
        task_id=record.task_id,
        parent_version=parent,
    )


def fetch_shared(lib: ModuleLibrary) -> SharedProjection | None:
    """Most recent shared projection (highest task index), or None."""
    if not lib.shared_indices:
        return None
    idx = max(lib.shared_indices)
    b = _read_verified(lib, KIND_SHARED, None, idx)
    return SharedProjection(b=b, task_index=idx)


def branch(
    lib: ModuleLibrary,
    task_id: str,
    classes: list[str],
    a_wu: np.ndarray,
    lambda_a: float,
) -> dict[str, WorkingCopy]:
    """Working copies for a task's classes; nothing is committed.

    Classes already in the library start from the blend of their stored expert
    with the warmup factor; unseen classes start from a copy of the warmup
    factor itself.
    """
    a_wu = as_matrix(a_wu, "a_wu")
    copies: dict[str, WorkingCopy] = {}
    for class_id in classes:
        existing = fetch(lib, class_id)
        if existing is None:
            copies[class_id] = WorkingCopy(class_id, a_wu.copy(), None, None)
        else:
            if existing.a.shape != a_wu.shape:
                raise RegistryError(
                    f"stored expert for {class_id!r} has shape {existing.a.shape}, "
                    f"warmup factor has shape {a_wu.shape}"
                )
            merged = merge_expert(existing.a, a_wu, lambda_a)
            copies[class_id] = WorkingCopy(class_id, merged, existing.version, lambda_a)
    return copies


def _commit_blob(
    lib: ModuleLibrary,
    kind: str,
    class_id: str | None,
    version: int,
    matrix: np.ndarray,
    task_id: str,
    lambda_used: float | None,
    parent_versions: list[int],
) -> CommitRecord:
    blob = encode_matrix(matrix)
    record = CommitRecord(
        seq=lib.next_seq,
        kind=kind,
        class_id=class_id,
        task_id=task_id,
        version=version,
        lambda_used=lambda_used,
        parent_versions=list(parent_versions),
        content_hash=kernels.fnv1a64(blob),
    )
    path = _blob_path(lib, kind, class_id, version)
    path.parent.mkdir(parents=True, exist_ok=True)
    _write_atomic(path, blob)
    _append_log(lib, record)
    lib._remember(record)
    return record


def commit_expert(
    lib: ModuleLibrary,
    class_id: str,
    a: np.ndarray,
    *,
    task_id: str,
    lambda_used: float | None = None,
    parent_versions: list[int] | None = None,
) -> int:
    """Persist a new expert version for a class; returns the version number."""
    version = lib.manifest.get(class_id, 0) + 1
    _commit_blob(lib, KIND_EXPERT, class_id, version, a, task_id, lambda_used, parent_versions or [])
    lib.manifest[class_id] = version
    _save_manifest(lib)
    return version


def commit_shared(lib: ModuleLibrary, b: np.ndarray, task_index: int, *, task_id: str) -> None:
    """Persist the shared projection produced at the end of a task."""
    if task_index in lib.shared_indices:
        raise RegistryError(f"a shared projection for task_index {task_index} is already committed")
    _commit_blob(lib, KIND_SHARED, None, task_index, b, task_id, None, [])
    lib.shared_indices.append(task_index)
    _save_manifest(lib)


def commit_warmup(lib: ModuleLibrary, a_wu: np.ndarray, *, task_id: str) -> int:
    """Persist a warmup factor for the record; nothing reads these back."""
    seq = lib.next_seq
    _commit_blob(lib, KIND_WARMUP, None, seq, a_wu, task_id, None, [])
    return seq


def checkout(lib: ModuleLibrary, class_id: str, version: int) -> ExpertModule:
    """Bit-exact historical expert at a specific version."""
    record = lib.record_for(KIND_EXPERT, class_id, version)
    if record is None:
        raise UnknownVersionError(f"class {class_id!r} has no committed version {version}")
    a = _read_verified(lib, KIND_EXPERT, class_id, version)
    parent = record.parent_versions[0] if record.parent_versions else None
    return ExpertModule(
        class_id=class_id,
        a=a,
        version=version,
        task_id=record.task_id,
        parent_version=parent,
    )


def log(lib: ModuleLibrary, class_id: str | None = None) -> list[CommitRecord]:
    """Seq-ordered history, optionally filtered to one class."""
    if class_id is None:
        return list(lib.records)
    return [r for r in lib.records if r.class_id == class_id]
