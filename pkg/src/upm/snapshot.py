"""Page snapshots of function instances and their sharing potential.

File layout (little endian)::

    b"UPMSNAP1"  u32 version=1  u32 page_size  u64 page_count
    page_count x { u64 vaddr, u8 kind, page_size content bytes }

``kind`` is 0 for anonymous memory, 1 for file-backed memory and 2 for
file-backed memory that the page cache already shares between instances.
"""

from __future__ import annotations

import enum
import os
import struct
from collections import Counter, defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field

import xxhash

from upm.errors import (
    BadMagic,
    BadPageKind,
    BadPageSize,
    BadSegmentSize,
    DuplicateVaddr,
    PageSizeMismatch,
    TruncatedFile,
    UnsortedVaddr,
)

MAGIC = b"UPMSNAP1"
VERSION = 1
HEADER = struct.Struct("<8sIIQ")
RECORD = struct.Struct("<QB")
SIMILARITY_BINS = (0, 25, 50, 75, 100)
DEFAULT_SEGMENT_SIZE = 1024


class PageKind(enum.IntEnum):
    ANONYMOUS = 0
    FILE_BACKED = 1
    FILE_BACKED_CACHE_SHARED = 2


@dataclass(frozen=True)
class SnapshotPage:
    vaddr: int
    kind: PageKind
    content: bytes


@dataclass
class Snapshot:
    page_size: int
    pages: list[SnapshotPage] = field(default_factory=list)
    version: int = VERSION

    def __post_init__(self):
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise BadPageSize(f"page size {self.page_size} is not a power of two", 12)

    def __len__(self) -> int:
        return len(self.pages)

    def add(self, vaddr: int, kind: PageKind, content: bytes) -> None:
        if len(content) != self.page_size:
            raise ValueError(f"page content must be {self.page_size} bytes")
        self.pages.append(SnapshotPage(vaddr, PageKind(kind), bytes(content)))

    def sort(self) -> None:
        self.pages.sort(key=lambda p: p.vaddr)

    def to_bytes(self) -> bytes:
        parts = [HEADER.pack(MAGIC, self.version, self.page_size, len(self.pages))]
        for page in self.pages:
            parts.append(RECORD.pack(page.vaddr, page.kind))
            parts.append(page.content)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> Snapshot:
        if len(data) < HEADER.size:
            if not MAGIC.startswith(data[:8]):
                raise BadMagic("bad magic", 0)
            raise TruncatedFile("header is truncated", len(data))
        magic, version, page_size, count = HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise BadMagic(f"bad magic {magic!r}", 0)
        if version != VERSION:
            raise BadMagic(f"unsupported version {version}", 8)
        if page_size == 0 or page_size & (page_size - 1):
            raise BadPageSize(f"page size {page_size} is not a power of two", 12)
        snap = cls(page_size)
        view = memoryview(data)
        off = HEADER.size
        rec = RECORD.size + page_size
        last = -1
        for _ in range(count):
            if off + rec > len(data):
                raise TruncatedFile(f"record {len(snap.pages)} of {count} is truncated", off)
            vaddr, kind = RECORD.unpack_from(data, off)
            if kind > PageKind.FILE_BACKED_CACHE_SHARED:
                raise BadPageKind(f"unknown page kind {kind}", off + 8)
            if vaddr == last:
                raise DuplicateVaddr(f"vaddr {vaddr:#x} appears twice", off)
            if vaddr < last:
                raise UnsortedVaddr(f"vaddr {vaddr:#x} follows {last:#x}", off)
            last = vaddr
            start = off + RECORD.size
            snap.pages.append(SnapshotPage(vaddr, PageKind(kind), view[start:start + page_size].tobytes()))
            off += rec
        if off != len(data):
            raise TruncatedFile(f"{len(data) - off} trailing bytes after last record", off)
        return snap


def load_snapshot(path: str | os.PathLike) -> Snapshot:
    with open(path, "rb") as f:
        return Snapshot.from_bytes(f.read())


def write_snapshot(snapshot: Snapshot, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(snapshot.to_bytes())


class _ContentIndex:
    """Set of page contents, hashed with byte-compare confirmation."""

    def __init__(self, contents: Iterable[bytes]):
        self._buckets: dict[int, list[bytes]] = defaultdict(list)
        for c in contents:
            self.add(c)

    def add(self, content: bytes) -> bool:
        bucket = self._buckets[xxhash.xxh64_intdigest(content)]
        if content in bucket:
            return False
        bucket.append(content)
        return True

    def __contains__(self, content: bytes) -> bool:
        return content in self._buckets.get(xxhash.xxh64_intdigest(content), ())

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets.values())


@dataclass(frozen=True)
class SharingReport:
    total_pages: int
    volatile_pages: int
    cache_shared_pages: int
    shareable_anonymous_pages: int
    shareable_file_backed_pages: int

    def _pct(self, n: int) -> float:
        return 100.0 * n / self.total_pages if self.total_pages else 0.0

    @property
    def percentages(self) -> dict[str, float]:
        return {
            "volatile": self._pct(self.volatile_pages),
            "cache_shared": self._pct(self.cache_shared_pages),
            "shareable_anonymous": self._pct(self.shareable_anonymous_pages),
            "shareable_file_backed": self._pct(self.shareable_file_backed_pages),
        }

    @property
    def shareable_pages(self) -> int:
        return self.shareable_anonymous_pages + self.shareable_file_backed_pages

    def to_dict(self) -> dict:
        d = {
            "total_pages": self.total_pages,
            "volatile_pages": self.volatile_pages,
            "cache_shared_pages": self.cache_shared_pages,
            "shareable_anonymous_pages": self.shareable_anonymous_pages,
            "shareable_file_backed_pages": self.shareable_file_backed_pages,
        }
        d.update({f"{k}_pct": round(v, 4) for k, v in self.percentages.items()})
        return d


def _same_page_size(snapshots: Sequence[Snapshot]) -> int:
    sizes = {s.page_size for s in snapshots}
    if len(sizes) != 1:
        raise PageSizeMismatch(f"snapshots use different page sizes: {sorted(sizes)}")
    return sizes.pop()


def classify(a: Snapshot, b: Snapshot) -> SharingReport:
    """Break ``a``'s pages down by whether their content also lives in ``b``.

    Matching is by content only; addresses are ignored.
    """
    _same_page_size([a, b])
    in_b = _ContentIndex(p.content for p in b.pages)
    counts: Counter[str] = Counter()
    for page in a.pages:
        if page.kind is PageKind.FILE_BACKED_CACHE_SHARED:
            counts["cache"] += 1
        elif page.content in in_b:
            counts["anon" if page.kind is PageKind.ANONYMOUS else "file"] += 1
        else:
            counts["volatile"] += 1
    return SharingReport(len(a.pages), counts["volatile"], counts["cache"],
                         counts["anon"], counts["file"])


def subpage_similarity(a: Snapshot, b: Snapshot,
                       segment_size: int = DEFAULT_SEGMENT_SIZE) -> dict[int, int]:
    """Histogram of ``a``'s pages by best aligned-segment overlap with any page of ``b``.

    A page lands in bin ``x`` when at least ``x`` percent (and less than the
    next bin) of its fixed, aligned segments equal the segments at the same
    offsets of its best-matching page in ``b``. Identical pages fill bin 100.
    """
    ps = _same_page_size([a, b])
    if segment_size <= 0 or ps % segment_size:
        raise BadSegmentSize(f"segment size {segment_size} does not divide page size {ps}")
    nseg = ps // segment_size
    # per segment position: segment bytes -> indices of b pages holding it there
    index: list[dict[bytes, list[int]]] = [defaultdict(list) for _ in range(nseg)]
    for i, page in enumerate(b.pages):
        for j in range(nseg):
            index[j][page.content[j * segment_size:(j + 1) * segment_size]].append(i)
    whole = _ContentIndex(p.content for p in b.pages)

    hist = dict.fromkeys(SIMILARITY_BINS, 0)
    for page in a.pages:
        if page.content in whole:
            hist[100] += 1
            continue
        hits: Counter[int] = Counter()
        for j in range(nseg):
            hits.update(index[j].get(page.content[j * segment_size:(j + 1) * segment_size], ()))
        best = max(hits.values(), default=0)
        # floor to the bin; a full match is impossible here, so cap at 75
        hist[min(75, 25 * (4 * best // nseg))] += 1
    return hist


def dedup_potential(snapshots: Sequence[Snapshot]) -> int:
    """Bytes an ideal content dedup would free across ``snapshots``.

    Page-cache-shared pages are excluded; they are shared already.
    """
    if len(snapshots) < 2:
        raise ValueError("need at least two snapshots")
    ps = _same_page_size(snapshots)
    seen = _ContentIndex(())
    total = 0
    for snap in snapshots:
        for page in snap.pages:
            if page.kind is not PageKind.FILE_BACKED_CACHE_SHARED:
                total += 1
                seen.add(page.content)
    return (total - len(seen)) * ps
