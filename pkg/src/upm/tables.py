"""Stable and reversed hash tables, plus their modeled memory overhead.

The stable table is a fixed array of buckets with separate chaining, sized
from the advised-memory budget. The reversed table is keyed by
``(mm_id, vaddr)``. Sizes reported here follow the kernel accounting model
(8-byte bucket heads, 48-byte entries), not Python's real allocation.
"""

from __future__ import annotations

from collections.abc import Iterator
from dataclasses import dataclass

BUCKET_BYTES = 8
STABLE_ENTRY_BYTES = 48
REVERSE_ENTRY_BYTES = 48
LOAD_COEFFICIENT_TENTHS = 13  # 1.3, kept integral so bucket counts are exact

MiB = 1 << 20
GiB = 1 << 30


@dataclass(frozen=True)
class TableConfig:
    budget_bytes: int = 200 * MiB
    page_size: int = 4096

    load_coefficient = LOAD_COEFFICIENT_TENTHS / 10

    @property
    def budget_pages(self) -> int:
        return self.budget_bytes // self.page_size

    @property
    def bucket_count(self) -> int:
        pages = -(-self.budget_bytes // self.page_size)
        return max(1, -(-pages * LOAD_COEFFICIENT_TENTHS // 10))

    @property
    def static_bytes(self) -> int:
        return self.bucket_count * BUCKET_BYTES


@dataclass(slots=True, eq=False)
class StableEntry:
    hash64: int
    vaddr: int
    mm_id: int
    frame_id: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.mm_id, self.vaddr)


@dataclass(slots=True, eq=False)
class ReverseEntry:
    mm_id: int
    vaddr: int
    pid: int
    hash64: int

    @property
    def key(self) -> tuple[int, int]:
        return (self.mm_id, self.vaddr)


@dataclass(frozen=True)
class OverheadReport:
    bucket_count: int
    static_bytes: int
    per_entry_bytes: int
    live_entries: int
    total_bytes: int

    def to_dict(self) -> dict:
        return {
            "bucket_count": self.bucket_count,
            "static_bytes": self.static_bytes,
            "per_entry_bytes": self.per_entry_bytes,
            "live_entries": self.live_entries,
            "total_bytes": self.total_bytes,
        }


class StableTable:
    """Hash -> advised page, separate chaining in insertion order."""

    def __init__(self, bucket_count: int):
        self.bucket_count = bucket_count
        self._buckets: list[list[StableEntry] | None] = [None] * bucket_count
        self._by_key: dict[tuple[int, int], StableEntry] = {}

    def __len__(self) -> int:
        return len(self._by_key)

    def __iter__(self) -> Iterator[StableEntry]:
        return iter(list(self._by_key.values()))

    def get(self, key: tuple[int, int]) -> StableEntry | None:
        return self._by_key.get(key)

    def chain(self, hash64: int) -> list[StableEntry]:
        """Snapshot of the bucket ``hash64`` falls into (may hold other hashes)."""
        bucket = self._buckets[hash64 % self.bucket_count]
        return list(bucket) if bucket else []

    def insert(self, entry: StableEntry) -> None:
        if entry.key in self._by_key:
            raise KeyError(f"stable entry for {entry.key} already present")
        idx = entry.hash64 % self.bucket_count
        bucket = self._buckets[idx]
        if bucket is None:
            bucket = self._buckets[idx] = []
        bucket.append(entry)
        self._by_key[entry.key] = entry

    def remove(self, entry: StableEntry) -> None:
        if self._by_key.get(entry.key) is not entry:
            return
        del self._by_key[entry.key]
        idx = entry.hash64 % self.bucket_count
        bucket = self._buckets[idx]
        bucket.remove(entry)
        if not bucket:
            self._buckets[idx] = None

    def longest_chain(self) -> int:
        return max((len(b) for b in self._buckets if b), default=0)


class ReverseTable:
    """``(mm_id, vaddr)`` -> last advised hash of that page."""

    def __init__(self) -> None:
        self._entries: dict[tuple[int, int], ReverseEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[ReverseEntry]:
        return iter(list(self._entries.values()))

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._entries

    def get(self, key: tuple[int, int]) -> ReverseEntry | None:
        return self._entries.get(key)

    def put(self, entry: ReverseEntry) -> None:
        self._entries[entry.key] = entry

    def remove(self, key: tuple[int, int]) -> None:
        self._entries.pop(key, None)

    def for_pid(self, pid: int) -> list[ReverseEntry]:
        # full walk on purpose: freed pages are no longer in the process map
        return [e for e in self._entries.values() if e.pid == pid]
