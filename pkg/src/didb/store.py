"""On-disk DIDB store: record-aligned chunk files under a checksummed manifest.

Layout of a store directory::

    MANIFEST                 text, see Manifest.render
    chunks/000000.didb       raw concatenated 46-byte records, no header
    chunks/000001.didb
    ...

A node root may additionally hold ``CURRENT`` (name of the active store
subdirectory) and ``versions/vNNNNNN`` store directories produced by sync.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import shutil
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .core import RECORD_LEN, DidbRecord, parse_record
from .errors import (
    DuplicateRecord,
    InsufficientSpace,
    IoFailure,
    ManifestMalformed,
    ManifestMissing,
    StaleVersion,
    StoreNotLoaded,
    UnsortedInput,
    ValidationFailed,
)

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
CHUNK_TARGET_BYTES = 4.9 * 2**20
CHUNK_CAPACITY = int(CHUNK_TARGET_BYTES // RECORD_LEN)  # 111_696 records
CHUNK_BYTES = CHUNK_CAPACITY * RECORD_LEN  # 5_138_016

MANIFEST_NAME = "MANIFEST"
CHUNK_DIR = "chunks"
CURRENT_NAME = "CURRENT"
VERSIONS_DIR = "versions"

_HEADER = f"DIDB-MANIFEST {FORMAT_VERSION}"
_DEC = r"(0|[1-9][0-9]*)"
_VERSION_RE = re.compile(rf"version {_DEC}\Z")
_RECORDS_RE = re.compile(rf"records {_DEC}\Z")
_DESC_RE = re.compile(rf"{_DEC} ([0-9]{{6}}) ([0-9]{{6}}) {_DEC} ([0-9a-f]{{64}})\Z")


def chunk_filename(index: int) -> str:
    return f"{index:06d}.didb"


def sha256_hex(data) -> str:
    return hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class Chunk:
    index: int
    data: bytes

    def __post_init__(self):
        if self.index < 0:
            raise ValueError("chunk index must be non-negative")
        n, rem = divmod(len(self.data), RECORD_LEN)
        if rem or not 1 <= n <= CHUNK_CAPACITY:
            raise ValueError(f"chunk {self.index}: bad size {len(self.data)}")

    @property
    def record_count(self) -> int:
        return len(self.data) // RECORD_LEN

    @property
    def first_prefix(self) -> str:
        return self.data[:6].decode("ascii")

    @property
    def last_prefix(self) -> str:
        return self.data[-RECORD_LEN:-RECORD_LEN + 6].decode("ascii")

    @property
    def records(self) -> list[DidbRecord]:
        d = self.data
        return [parse_record(d[i:i + RECORD_LEN]) for i in range(0, len(d), RECORD_LEN)]

    def descriptor(self) -> "ChunkDescriptor":
        return ChunkDescriptor(self.index, self.first_prefix, self.last_prefix,
                               self.record_count, sha256_hex(self.data))


@dataclass(frozen=True)
class ChunkDescriptor:
    index: int
    first_prefix: str
    last_prefix: str
    record_count: int
    checksum: str

    def render(self) -> str:
        return (f"{self.index} {self.first_prefix} {self.last_prefix} "
                f"{self.record_count} {self.checksum}")


@dataclass(frozen=True)
class Manifest:
    didb_version: int
    total_records: int
    descriptors: tuple[ChunkDescriptor, ...] = ()
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        object.__setattr__(self, "descriptors", tuple(self.descriptors))
        _check_manifest(self)

    def render(self) -> bytes:
        lines = [_HEADER, f"version {self.didb_version}", f"records {self.total_records}"]
        lines += [d.render() for d in self.descriptors]
        return ("\n".join(lines) + "\n").encode("utf-8")

    @classmethod
    def parse(cls, data: bytes) -> "Manifest":
        try:
            text = data.decode("utf-8")
        except UnicodeDecodeError:
            raise ManifestMalformed("manifest is not UTF-8") from None
        if not text.endswith("\n"):
            raise ManifestMalformed("manifest must end with LF")
        lines = text[:-1].split("\n")
        if len(lines) < 3 or lines[0] != _HEADER:
            raise ManifestMalformed("bad manifest header")
        mv, mr = _VERSION_RE.match(lines[1]), _RECORDS_RE.match(lines[2])
        if not mv or not mr:
            raise ManifestMalformed("bad version/records line")
        descs = []
        for line in lines[3:]:
            m = _DESC_RE.match(line)
            if not m:
                raise ManifestMalformed(f"bad descriptor line {line!r}")
            descs.append(ChunkDescriptor(int(m[1]), m[2], m[3], int(m[4]), m[5]))
        try:
            return cls(int(mv[1]), int(mr[1]), tuple(descs))
        except ValueError as exc:
            raise ManifestMalformed(str(exc)) from None

    @property
    def chunk_count(self) -> int:
        return len(self.descriptors)


def _check_manifest(m: Manifest) -> None:
    if m.format_version != FORMAT_VERSION:
        raise ManifestMalformed(f"unsupported format {m.format_version}")
    if m.didb_version < 0 or m.total_records < 0:
        raise ManifestMalformed("negative version or record count")
    total = 0
    prev_last = None
    for i, d in enumerate(m.descriptors):
        if d.index != i:
            raise ManifestMalformed(f"descriptor {i} has index {d.index}")
        if not 1 <= d.record_count <= CHUNK_CAPACITY:
            raise ManifestMalformed(f"chunk {i}: record_count {d.record_count}")
        if d.first_prefix > d.last_prefix:
            raise ManifestMalformed(f"chunk {i}: prefix range reversed")
        if prev_last is not None and d.first_prefix < prev_last:
            raise ManifestMalformed(f"chunk {i}: prefix ranges out of order")
        if len(d.checksum) != 64:
            raise ManifestMalformed(f"chunk {i}: checksum length")
        prev_last = d.last_prefix
        total += d.record_count
    if total != m.total_records:
        raise ManifestMalformed(f"records {m.total_records} != sum of counts {total}")


def _months_between(first: str, last: str):
    y, mo = int(first[:4]), int(first[4:])
    ey, emo = int(last[:4]), int(last[4:])
    while (y, mo) <= (ey, emo):
        yield f"{y:04d}{mo:02d}"
        mo += 1
        if mo > 12:
            y, mo = y + 1, 1


@dataclass(frozen=True)
class PrefixIndex:
    """Birth prefix to candidate chunk indices, derived from chunk prefix ranges."""

    mapping: dict = field(default_factory=dict)

    @classmethod
    def from_ranges(cls, ranges: Iterable[tuple[int, str, str]]) -> "PrefixIndex":
        mapping: dict[str, list[int]] = {}
        for index, first, last in ranges:
            for p in _months_between(first, last):
                mapping.setdefault(p, []).append(index)
        return cls({k: tuple(v) for k, v in mapping.items()})

    @classmethod
    def from_manifest(cls, manifest: Manifest) -> "PrefixIndex":
        return cls.from_ranges((d.index, d.first_prefix, d.last_prefix)
                               for d in manifest.descriptors)

    @classmethod
    def from_chunks(cls, chunks: Sequence[Chunk]) -> "PrefixIndex":
        return cls.from_ranges((c.index, c.first_prefix, c.last_prefix) for c in chunks)

    def candidates(self, prefix: str) -> tuple[int, ...]:
        return self.mapping.get(prefix, ())


# packing ----------------------------------------------------------------

def _check_sorted(encoded: Sequence[bytes]) -> None:
    for i in range(1, len(encoded)):
        a, b = encoded[i - 1], encoded[i]
        if a >= b:
            if a == b:
                raise DuplicateRecord(f"duplicate record at position {i}: {b.decode()}")
            raise UnsortedInput(f"records out of order at position {i}")


def pack_encoded(encoded: Sequence[bytes]) -> list[Chunk]:
    """Greedy record-aligned packing of sorted 46-byte record encodings."""
    _check_sorted(encoded)
    return [Chunk(i, b"".join(encoded[start:start + CHUNK_CAPACITY]))
            for i, start in enumerate(range(0, len(encoded), CHUNK_CAPACITY))]


def pack_chunks(records: Sequence[DidbRecord]) -> list[Chunk]:
    return pack_encoded([r.to_bytes() for r in records])


# writing / reading ------------------------------------------------------

def _fsync_write(path: Path, data: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())


def write_store(chunks: Sequence[Chunk], didb_version: int, directory) -> Manifest:
    """Write chunks and MANIFEST to ``directory`` atomically.

    Files are staged in a sibling directory and renamed into place, so readers
    either see no store or a complete one.
    """
    directory = Path(directory)
    chunks = list(chunks)
    for i, c in enumerate(chunks):
        if c.index != i:
            raise ValueError(f"chunk at position {i} has index {c.index}")
    manifest = Manifest(didb_version, sum(c.record_count for c in chunks),
                        tuple(c.descriptor() for c in chunks))
    parent = directory.parent
    try:
        parent.mkdir(parents=True, exist_ok=True)
        needed = sum(len(c.data) for c in chunks) + 4096
        if shutil.disk_usage(parent).free < needed:
            raise InsufficientSpace(f"need {needed} bytes under {parent}")
        if directory.exists() and (not directory.is_dir() or any(directory.iterdir())):
            raise IoFailure(f"{directory} exists and is not empty")
        staging = parent / f".{directory.name}.staging-{uuid.uuid4().hex[:12]}"
        (staging / CHUNK_DIR).mkdir(parents=True)
        try:
            for c in chunks:
                _fsync_write(staging / CHUNK_DIR / chunk_filename(c.index), c.data)
            _fsync_write(staging / MANIFEST_NAME, manifest.render())
            if directory.exists():
                directory.rmdir()
            os.rename(staging, directory)
        except BaseException:
            shutil.rmtree(staging, ignore_errors=True)
            raise
    except (InsufficientSpace, IoFailure):
        raise
    except OSError as exc:
        raise IoFailure(str(exc)) from exc
    return manifest


def read_manifest(directory) -> tuple[Manifest, bytes]:
    path = Path(directory) / MANIFEST_NAME
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ManifestMissing(f"no manifest at {path}") from None
    return Manifest.parse(raw), raw


def read_store(directory) -> tuple[Manifest, list[Chunk]]:
    directory = Path(directory)
    manifest, _ = read_manifest(directory)
    chunks = [Chunk(d.index, (directory / CHUNK_DIR / chunk_filename(d.index)).read_bytes())
              for d in manifest.descriptors]
    return manifest, chunks


def _chunk_ok(desc: ChunkDescriptor, data: bytes, prev_last: bytes | None) -> bool:
    if sha256_hex(data) != desc.checksum:
        return False
    if len(data) != desc.record_count * RECORD_LEN:
        return False
    mat = _kernels.as_matrix(data)
    if not (_kernels.well_formed(mat) and _kernels.strictly_ascending(mat)):
        return False
    if data[:6].decode() != desc.first_prefix or data[-RECORD_LEN:-40].decode() != desc.last_prefix:
        return False
    return prev_last is None or prev_last < data[:RECORD_LEN]


def _scan(directory: Path, manifest: Manifest):
    """Yield ``(index, data or None, ok)`` for every descriptor."""
    prev_last = None
    for d in manifest.descriptors:
        try:
            data = (directory / CHUNK_DIR / chunk_filename(d.index)).read_bytes()
        except OSError:
            yield d.index, None, False
            prev_last = None
            continue
        ok = _chunk_ok(d, data, prev_last)
        prev_last = data[-RECORD_LEN:] if ok else None
        yield d.index, data, ok


def validate_store(directory) -> list[int]:
    """Indices of chunks whose file is missing, fails its checksum, or breaks order."""
    directory = Path(directory)
    manifest, _ = read_manifest(directory)
    return [i for i, _, ok in _scan(directory, manifest) if not ok]


def diff_manifests(old: Manifest | None, new: Manifest) -> list[int]:
    old_sums = [d.checksum for d in old.descriptors] if old is not None else []
    return [d.index for d in new.descriptors
            if d.index >= len(old_sums) or old_sums[d.index] != d.checksum]


# loaded snapshots and atomic swap ---------------------------------------

class LoadedStore:
    """Immutable in-memory snapshot of one validated store version."""

    def __init__(self, directory: Path, manifest: Manifest, manifest_bytes: bytes,
                 chunks: list[bytes]):
        self.directory = directory
        self.manifest = manifest
        self.manifest_bytes = manifest_bytes
        self._chunks = chunks
        self._mats = [_kernels.as_matrix(c) for c in chunks]
        self.index = PrefixIndex.from_manifest(manifest)

    @property
    def version(self) -> int:
        return self.manifest.didb_version

    def chunk_bytes(self, index: int) -> bytes:
        return self._chunks[index]

    def contains(self, record: DidbRecord | bytes) -> bool:
        key = record if isinstance(record, bytes) else record.to_bytes()
        arr = _kernels.key_array(key)
        for i in self.index.candidates(key[:6].decode("ascii")):
            if _kernels.contains(self._mats[i], arr):
                return True
        return False

    def __repr__(self):
        return f"<LoadedStore v{self.version} {self.manifest.total_records} records at {self.directory}>"


def load_store(directory) -> LoadedStore:
    """Read and validate a store; raise :class:`ValidationFailed` on any bad chunk."""
    directory = Path(directory)
    manifest, raw = read_manifest(directory)
    chunks, corrupt = [], []
    for i, data, ok in _scan(directory, manifest):
        if not ok:
            corrupt.append(i)
        chunks.append(data)
    if corrupt:
        raise ValidationFailed(f"{directory}: corrupt chunks {corrupt}", corrupt)
    return LoadedStore(directory, manifest, raw, chunks)


class StoreHandle:
    """Holds the active snapshot; readers see exactly one version per call.

    Lookups read ``self.active`` once and answer entirely from that snapshot,
    so a concurrent swap can never mix versions within a response.
    """

    def __init__(self, active: LoadedStore | None = None):
        self.active = active
        self._swap_lock = threading.Lock()

    @property
    def version(self) -> int | None:
        snap = self.active
        return snap.version if snap is not None else None

    def lookup(self, record: DidbRecord | bytes) -> tuple[bool, int]:
        snap = self.active
        if snap is None:
            raise StoreNotLoaded("no store loaded")
        return snap.contains(record), snap.version

    def activate(self, snap: LoadedStore) -> Manifest:
        with self._swap_lock:
            cur = self.active
            if cur is not None and snap.version <= cur.version:
                raise StaleVersion(f"version {snap.version} is not newer than {cur.version}")
            self.active = snap
        log.info("activated store v%d from %s", snap.version, snap.directory)
        return snap.manifest

    def swap_version(self, new_directory) -> Manifest:
        return self.activate(load_store(new_directory))


def lookup(handle: StoreHandle, record: DidbRecord) -> bool:
    return handle.lookup(record)[0]


def swap_version(handle: StoreHandle, new_directory) -> Manifest:
    return handle.swap_version(new_directory)


# node roots -------------------------------------------------------------

def active_directory(root) -> Path | None:
    """Resolve the active store of a node root (``CURRENT`` wins over a bare store)."""
    root = Path(root)
    cur = root / CURRENT_NAME
    if cur.exists():
        name = cur.read_text().strip()
        if name:
            return root / name
    if (root / MANIFEST_NAME).exists():
        return root
    return None


def version_dirname(version: int) -> str:
    return f"{VERSIONS_DIR}/v{version:06d}"


def set_current(root, relative: str) -> None:
    """Point ``root/CURRENT`` at ``relative`` via write-then-rename."""
    root = Path(root)
    tmp = root / f".{CURRENT_NAME}.{uuid.uuid4().hex[:8]}"
    _fsync_write(tmp, (relative + "\n").encode())
    os.replace(tmp, root / CURRENT_NAME)


def publish(store_dir, root) -> Path:
    """Copy a built store into a node root as ``versions/vN`` and make it current."""
    manifest, _ = read_manifest(store_dir)
    bad = validate_store(store_dir)
    if bad:
        raise ValidationFailed(f"{store_dir}: corrupt chunks {bad}", bad)
    root = Path(root)
    rel = version_dirname(manifest.didb_version)
    target = root / rel
    if not target.exists():
        target.parent.mkdir(parents=True, exist_ok=True)
        staging = target.parent / f".{target.name}.staging-{uuid.uuid4().hex[:8]}"
        shutil.copytree(store_dir, staging)
        os.rename(staging, target)
    set_current(root, rel)
    return target


def load_matrix(directory) -> np.ndarray:
    """All records of a store as one ``(n, 46)`` matrix, in index order."""
    _, chunks = read_store(directory)
    return _kernels.as_matrix(b"".join(c.data for c in chunks))
