"""Physical frames and per-process page tables with copy-on-write faults.

A :class:`MemorySystem` owns every frame and every simulated process.
Frames are reference counted; a frame shared by more than one page-table
entry is always write-protected, and a write to a write-protected entry
allocates a private copy for the writer (a CoW fault).

All state is guarded by one re-entrant lock, ``MemorySystem.lock``. The
dedup engine acquires the same lock for its own tables, so a caller that
holds it sees page tables, frames and UPM tables in a consistent state.
"""

from __future__ import annotations

import itertools
import threading
from collections import Counter
from collections.abc import Callable, Iterator
from dataclasses import dataclass, field
from typing import Any

from upm.errors import (
    InvariantViolation,
    NotPresent,
    OverlappingMapping,
    UnalignedAddress,
    UnknownProcess,
    UnmappedRange,
)

DEFAULT_PAGE_SIZE = 4096


@dataclass(slots=True, eq=False)
class PhysicalFrame:
    """One page of physical memory.

    ``content`` starts as a read-only view into the buffer the mapping was
    filled from and is copied into a private ``bytearray`` on first write.
    """

    frame_id: int
    content: bytearray | memoryview
    refcount: int = 1
    write_protected: bool = False


@dataclass(slots=True, eq=False)
class PageTableEntry:
    frame_id: int
    present: bool = True
    writable: bool = True


@dataclass(slots=True, eq=False)
class AddressSpace:
    pid: int
    mm_id: int
    page_table: dict[int, PageTableEntry] = field(default_factory=dict)
    upm_used: bool = False


@dataclass(frozen=True, slots=True)
class WriteOutcome:
    """Result of :meth:`MemorySystem.write`.

    ``cow_broken`` is false for an in-place write; otherwise the writer got
    a private copy whose id is ``new_frame_id``.
    """

    cow_broken: bool
    new_frame_id: int | None = None


IN_PLACE = WriteOutcome(False)

ExitHook = Callable[[AddressSpace], None]


def _is_power_of_two(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def same_content(a: bytearray | memoryview, b: bytearray | memoryview) -> bool:
    # memoryview == memoryview compares item by item; go through bytes
    return bytes(a) == bytes(b)


def read_source(source: Any, n: int) -> bytes:
    """Pull ``n`` bytes out of a content source, zero-padding short input.

    ``source`` may be ``None`` (zero fill), a bytes-like object, an object
    with a ``read(n)`` method (file or stream), or a callable ``f(n)``.
    """
    if source is None:
        return bytes(n)
    if hasattr(source, "read"):
        data = source.read(n)
    elif callable(source):
        data = source(n)
    else:
        data = source
    if type(data) is not bytes:
        data = memoryview(data)[:n].tobytes()  # detach from mutable buffers
    if len(data) < n:
        data += bytes(n - len(data))
    return data[:n]


class MemorySystem:
    """Simulated physical memory shared by a set of processes."""

    def __init__(self, page_size: int = DEFAULT_PAGE_SIZE):
        if not _is_power_of_two(page_size):
            raise ValueError(f"page_size must be a power of two, got {page_size}")
        self.page_size = page_size
        self.lock = threading.RLock()
        self._frames: dict[int, PhysicalFrame] = {}
        self._spaces: dict[int, AddressSpace] = {}
        self._by_mm: dict[int, AddressSpace] = {}
        self._next_pid = itertools.count(1)
        self._next_mm = itertools.count(0x10000)
        self._next_frame = itertools.count(1)
        self._exit_hooks: list[ExitHook] = []
        self.cow_faults = 0

    # -- helpers ---------------------------------------------------------

    def page_count(self, length: int) -> int:
        return -(-length // self.page_size)

    def page_base(self, vaddr: int) -> int:
        return vaddr & ~(self.page_size - 1)

    def _check_aligned(self, vaddr: int) -> None:
        if vaddr < 0 or vaddr % self.page_size:
            raise UnalignedAddress(f"address {vaddr:#x} is not aligned to {self.page_size}")

    def _space(self, pid: int) -> AddressSpace:
        try:
            return self._spaces[pid]
        except KeyError:
            raise UnknownProcess(f"no live process with pid {pid}") from None

    def _pte(self, space: AddressSpace, page: int) -> PageTableEntry:
        pte = space.page_table.get(page)
        if pte is None:
            raise UnmappedRange(f"pid {space.pid}: address {page:#x} is not mapped")
        if not pte.present:
            raise NotPresent(f"pid {space.pid}: page {page:#x} is not present")
        return pte

    def _new_frame(self, content: bytearray | memoryview) -> PhysicalFrame:
        frame = PhysicalFrame(next(self._next_frame), content)
        self._frames[frame.frame_id] = frame
        return frame

    def _release(self, frame_id: int) -> None:
        frame = self._frames[frame_id]
        frame.refcount -= 1
        if frame.refcount == 0:
            del self._frames[frame_id]

    def on_exit(self, hook: ExitHook) -> None:
        """Register ``hook(space)``; it runs under the lock when a process exits."""
        self._exit_hooks.append(hook)

    # -- processes -------------------------------------------------------

    def create_process(self) -> int:
        with self.lock:
            space = AddressSpace(pid=next(self._next_pid), mm_id=next(self._next_mm))
            self._spaces[space.pid] = space
            self._by_mm[space.mm_id] = space
            return space.pid

    def space(self, pid: int) -> AddressSpace:
        with self.lock:
            return self._space(pid)

    def space_by_mm(self, mm_id: int) -> AddressSpace | None:
        return self._by_mm.get(mm_id)

    def pids(self) -> list[int]:
        with self.lock:
            return list(self._spaces)

    def exit_process(self, pid: int) -> None:
        with self.lock:
            space = self._space(pid)
            for page, pte in space.page_table.items():
                pte.present = False
                self._release(pte.frame_id)
            space.page_table.clear()
            del self._spaces[pid]
            del self._by_mm[space.mm_id]
            for hook in self._exit_hooks:
                hook(space)

    # -- mappings --------------------------------------------------------

    def map_anonymous(self, pid: int, vaddr: int, length: int, content_source: Any = None) -> None:
        """Back ``[vaddr, vaddr + length)`` with fresh private frames.

        The length is rounded up to whole pages; content shorter than that is
        zero-padded.
        """
        self._check_aligned(vaddr)
        if length <= 0:
            raise ValueError("mapping length must be positive")
        ps = self.page_size
        npages = self.page_count(length)
        data = read_source(content_source, npages * ps)
        view = memoryview(data)
        pages = range(vaddr, vaddr + npages * ps, ps)
        with self.lock:
            space = self._space(pid)
            table = space.page_table
            for page in pages:
                if page in table:
                    raise OverlappingMapping(f"pid {pid}: {page:#x} is already mapped")
            for i, page in enumerate(pages):
                frame = self._new_frame(view[i * ps:(i + 1) * ps])
                table[page] = PageTableEntry(frame.frame_id)

    def unmap(self, pid: int, vaddr: int, length: int) -> None:
        self._check_aligned(vaddr)
        ps = self.page_size
        pages = range(vaddr, vaddr + self.page_count(length) * ps, ps)
        with self.lock:
            space = self._space(pid)
            table = space.page_table
            for page in pages:
                if page not in table:
                    raise UnmappedRange(f"pid {pid}: {page:#x} is not mapped")
            for page in pages:
                pte = table.pop(page)
                pte.present = False
                self._release(pte.frame_id)

    # -- access ----------------------------------------------------------

    def read(self, pid: int, vaddr: int, length: int) -> bytes:
        ps = self.page_size
        out = bytearray()
        with self.lock:
            space = self._space(pid)
            pos, end = vaddr, vaddr + length
            while pos < end:
                page = self.page_base(pos)
                pte = self._pte(space, page)
                lo = pos - page
                hi = min(ps, end - page)
                out += self._frames[pte.frame_id].content[lo:hi]
                pos = page + hi
        return bytes(out)

    def write(self, pid: int, vaddr: int, data: bytes) -> WriteOutcome:
        """Write within a single page, breaking copy-on-write if needed."""
        page = self.page_base(vaddr)
        offset = vaddr - page
        if offset + len(data) > self.page_size:
            raise ValueError("write crosses a page boundary; split it first")
        with self.lock:
            pte = self._pte(self._space(pid), page)
            frame = self._frames[pte.frame_id]
            if pte.writable and not frame.write_protected:
                if type(frame.content) is not bytearray:
                    frame.content = bytearray(frame.content)
                frame.content[offset:offset + len(data)] = data
                return IN_PLACE
            copy = self._new_frame(bytearray(frame.content))
            copy.content[offset:offset + len(data)] = data
            self._release(frame.frame_id)
            pte.frame_id = copy.frame_id
            pte.writable = True
            self.cow_faults += 1
            return WriteOutcome(True, copy.frame_id)

    def write_protect(self, pid: int, vaddr: int) -> None:
        with self.lock:
            pte = self._pte(self._space(pid), self.page_base(vaddr))
            pte.writable = False
            self._frames[pte.frame_id].write_protected = True

    def remap(self, pid: int, vaddr: int, frame_id: int) -> None:
        """Point a page at an existing frame, read-only. Used for merging."""
        with self.lock:
            self._repoint(self._pte(self._space(pid), self.page_base(vaddr)), frame_id)

    def _repoint(self, pte: PageTableEntry, frame_id: int) -> None:
        if pte.frame_id == frame_id:
            return
        target = self._frames[frame_id]
        target.refcount += 1
        target.write_protected = True
        self._release(pte.frame_id)
        pte.frame_id = frame_id
        pte.writable = False

    # -- inspection ------------------------------------------------------

    def lookup(self, pid: int, vaddr: int) -> PageTableEntry | None:
        """Page-table entry for ``vaddr``'s page, or ``None``; never raises."""
        space = self._spaces.get(pid)
        if space is None:
            return None
        return space.page_table.get(self.page_base(vaddr))

    def frame(self, frame_id: int) -> PhysicalFrame:
        return self._frames[frame_id]

    def frame_of(self, pid: int, vaddr: int) -> PhysicalFrame:
        with self.lock:
            pte = self._pte(self._space(pid), self.page_base(vaddr))
            return self._frames[pte.frame_id]

    def frames(self) -> Iterator[PhysicalFrame]:
        return iter(list(self._frames.values()))

    @property
    def frame_count(self) -> int:
        return len(self._frames)

    @property
    def live_frame_bytes(self) -> int:
        return len(self._frames) * self.page_size

    def rss(self, pid: int) -> int:
        with self.lock:
            space = self._space(pid)
            return sum(self.page_size for pte in space.page_table.values() if pte.present)

    def check_invariants(self) -> None:
        """Full scan of refcounts and protection bits; raises on mismatch."""
        with self.lock:
            refs: Counter[int] = Counter()
            for space in self._spaces.values():
                for page, pte in space.page_table.items():
                    if page % self.page_size:
                        raise InvariantViolation(f"pid {space.pid}: unaligned key {page:#x}")
                    if pte.frame_id not in self._frames:
                        raise InvariantViolation(
                            f"pid {space.pid}: {page:#x} maps reclaimed frame {pte.frame_id}")
                    refs[pte.frame_id] += 1
                    if pte.writable and self._frames[pte.frame_id].write_protected:
                        raise InvariantViolation(
                            f"pid {space.pid}: {page:#x} writable on a protected frame")
            for frame in self._frames.values():
                if frame.refcount != refs[frame.frame_id]:
                    raise InvariantViolation(
                        f"frame {frame.frame_id}: refcount {frame.refcount}, "
                        f"{refs[frame.frame_id]} mappings")
                if frame.refcount > 1 and not frame.write_protected:
                    raise InvariantViolation(f"frame {frame.frame_id} shared but writable")
                if len(frame.content) != self.page_size:
                    raise InvariantViolation(f"frame {frame.frame_id} has wrong length")
