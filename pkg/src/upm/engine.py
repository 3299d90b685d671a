"""User-guided page merging.

A process hands a page-aligned range to :meth:`UPMEngine.advise`. Each page
is hashed and looked up in the reversed table (was this page advised
before, and has it changed since?) and then in the stable table (does any
other advised page carry the same hash?). A candidate is re-validated,
both pages are write-protected and compared byte by byte, and on equality
the new page is repointed at the candidate's frame. Pages without a match
are recorded as future merge candidates.

Every advised page, merged or not, owns one stable and one reversed entry,
so a frame shared by ``k`` processes stays discoverable until the last of
them exits.
"""

from __future__ import annotations

import enum
import functools
import json
import weakref
from collections.abc import Callable
from dataclasses import asdict, dataclass, field
from time import perf_counter

import xxhash

from upm.address_space import AddressSpace, MemorySystem, PageTableEntry, same_content
from upm.errors import (
    InvariantViolation,
    MergeAborted,
    TableBudgetExceeded,
    UnmappedRange,
)
from upm.tables import (
    REVERSE_ENTRY_BYTES,
    STABLE_ENTRY_BYTES,
    MiB,
    OverheadReport,
    ReverseEntry,
    ReverseTable,
    StableEntry,
    StableTable,
    TableConfig,
)

STABLE_SEARCH = "stable-table search"
HASHING = "hash calculation"
REVERSE_SEARCH = "reverse-table search"
MERGE = "merge"
INSERT = "insert"
LOCK_WAIT = "lock wait"
PHASES = (STABLE_SEARCH, HASHING, REVERSE_SEARCH, MERGE, INSERT, LOCK_WAIT)

# aborted merges before a page falls back to a plain insert
MAX_MERGE_ATTEMPTS = 4

HashFn = Callable[[bytes], int]
InterleaveHook = Callable[[int, int], None]


def compute_hash(content: bytes | bytearray, seed: int = 0) -> int:
    """64-bit xxHash of a page."""
    return xxhash.xxh64_intdigest(content, seed)


@dataclass(frozen=True)
class EngineConfig:
    page_size: int = 4096
    budget_bytes: int = 200 * MiB
    hash_seed: int = 0
    synchronous: bool = True

    def __post_init__(self):
        if not self.synchronous:
            raise ValueError("only synchronous advise is supported")
        if self.budget_bytes < self.page_size:
            raise ValueError("budget must cover at least one page")

    @property
    def table(self) -> TableConfig:
        return TableConfig(self.budget_bytes, self.page_size)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> EngineConfig:
        return cls(**json.loads(text))


class Verdict(enum.Enum):
    VALID = "valid"
    NOT_PRESENT = "not_present"
    FRAME_CHANGED = "frame_changed"
    HASH_MISMATCH = "hash_mismatch"

    @property
    def valid(self) -> bool:
        return self is Verdict.VALID


@dataclass
class AdviseReport:
    pid: int
    pages_scanned: int = 0
    pages_inserted: int = 0
    pages_merged: int = 0
    pages_skipped_unchanged: int = 0
    stale_entries_replaced: int = 0
    stale_candidates_purged: int = 0
    compare_mismatches: int = 0
    merges_aborted: int = 0
    bytes_saved: int = 0
    elapsed: float = 0.0
    phase_timings: dict[str, float] = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))

    @property
    def merging(self) -> bool:
        """True for calls dominated by merges rather than inserts."""
        return self.pages_merged > self.pages_inserted

    def counts(self) -> dict[str, int]:
        d = asdict(self)
        del d["elapsed"], d["phase_timings"]
        return d

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class CleanupReport:
    reverse_removed: int
    stable_removed: int


class _PhaseClock:
    """Attributes wall time to whichever phase is current.

    Lock waits are carved out of the enclosing phase and booked under
    ``lock wait``, so the phases never overlap.
    """

    __slots__ = ("totals", "_phase", "_mark")

    def __init__(self):
        self.totals = dict.fromkeys(PHASES, 0.0)
        self._phase: str | None = None
        self._mark = perf_counter()

    def switch(self, phase: str | None) -> None:
        now = perf_counter()
        if self._phase is not None:
            self.totals[self._phase] += now - self._mark
        self._phase, self._mark = phase, now

    def acquire(self, lock, then: str | None = None) -> None:
        """Take ``lock``, then continue in phase ``then`` (default: the current one)."""
        t0 = perf_counter()
        lock.acquire()
        t1 = perf_counter()
        if self._phase is not None:
            self.totals[self._phase] += t0 - self._mark
        self.totals[LOCK_WAIT] += t1 - t0
        self._mark = t1
        if then is not None:
            self._phase = then


class UPMEngine:
    """Dedup engine bound to one :class:`MemorySystem`."""

    def __init__(
        self,
        memory: MemorySystem,
        config: EngineConfig | None = None,
        *,
        hash_fn: HashFn | None = None,
    ):
        config = config or EngineConfig(page_size=memory.page_size)
        if config.page_size != memory.page_size:
            raise ValueError("engine and memory page sizes differ")
        self.memory = memory
        self.config = config
        self.table_config = config.table
        self.lock = memory.lock
        self.stable = StableTable(self.table_config.bucket_count)
        self.reverse = ReverseTable()
        seed = config.hash_seed
        self._hash: HashFn = hash_fn or functools.partial(xxhash.xxh64_intdigest, seed=seed)
        self.interleave_hook: InterleaveHook | None = None
        self._reserved_pages = 0
        self.advise_calls = 0
        self.tlb_flushes = 0
        self.history: list[AdviseReport] = []
        # weak, so a dropped engine and its memory are freed without the cycle collector
        on_exit = weakref.WeakMethod(self._on_exit)
        memory.on_exit(lambda space: (hook := on_exit()) is not None and hook(space))

    def compute_hash(self, content: bytes | bytearray) -> int:
        return self._hash(content)

    # -- advise ----------------------------------------------------------

    def advise(self, pid: int, vaddr: int, length: int) -> AdviseReport:
        """Deduplicate every page of ``[vaddr, vaddr + length)`` synchronously."""
        mem = self.memory
        mem._check_aligned(vaddr)
        ps = mem.page_size
        pages = range(vaddr, vaddr + mem.page_count(length) * ps, ps)
        report = AdviseReport(pid)
        start = perf_counter()
        clock = _PhaseClock()

        clock.acquire(self.lock)
        try:
            space = mem._space(pid)
            for page in pages:
                mem._pte(space, page)
            fresh = {page for page in pages if (space.mm_id, page) not in self.reverse}
            in_use = len(self.reverse) + self._reserved_pages
            if in_use + len(fresh) > self.table_config.budget_pages:
                raise TableBudgetExceeded(
                    f"advising {len(fresh)} new pages would exceed the budget of "
                    f"{self.table_config.budget_pages} pages ({in_use} in use)")
            self._reserved_pages += len(fresh)
            self.advise_calls += 1
            if pages:
                space.upm_used = True
        finally:
            self.lock.release()

        try:
            for page in pages:
                try:
                    self._advise_page(space, page, report, clock)
                finally:
                    if page in fresh:
                        # the page now holds a real entry (or never will)
                        with self.lock:
                            self._reserved_pages -= 1
                        fresh.discard(page)
                report.pages_scanned += 1
        finally:
            if fresh:
                with self.lock:
                    self._reserved_pages -= len(fresh)
            clock.switch(None)
            report.elapsed = perf_counter() - start
            report.phase_timings = clock.totals
            report.bytes_saved = report.pages_merged * ps
            with self.lock:
                self.history.append(report)
        return report

    def _advise_page(self, space: AddressSpace, page: int, report: AdviseReport,
                     clock: _PhaseClock) -> None:
        key = (space.mm_id, page)
        clock.acquire(self.lock, HASHING)
        try:
            for attempt in range(MAX_MERGE_ATTEMPTS + 1):
                if attempt:
                    clock.switch(HASHING)
                pte = self._live_pte(space, page)
                h = self._hash(self.memory._frames[pte.frame_id].content)

                clock.switch(REVERSE_SEARCH)
                if self.reverse.get(key) is not None:
                    own = self.stable.get(key)
                    if (own is not None and own.hash64 == h
                            and self._check(own) is Verdict.VALID):
                        report.pages_skipped_unchanged += 1
                        return
                    self._drop(key)
                    report.stale_entries_replaced += 1

                clock.switch(STABLE_SEARCH)
                source = None
                if attempt < MAX_MERGE_ATTEMPTS:
                    source = self._find_identical(space, page, pte, h, report, clock)
                if source is None:
                    clock.switch(INSERT)
                    self._record(space, page, pte.frame_id, h)
                    report.pages_inserted += 1
                    return
                target_frame = pte.frame_id

                hook = self.interleave_hook
                if hook is not None:
                    # window between comparison and merge, for fault injection
                    clock.switch(None)
                    self.lock.release()
                    try:
                        hook(space.pid, page)
                    finally:
                        clock.acquire(self.lock)

                clock.switch(MERGE)
                try:
                    self._merge(space, page, source, target_frame)
                except MergeAborted:
                    report.merges_aborted += 1
                    continue
                clock.switch(INSERT)
                self._record(space, page, source.frame_id, h)
                report.pages_merged += 1
                return
        finally:
            clock.switch(None)
            self.lock.release()

    def _live_pte(self, space: AddressSpace, page: int) -> PageTableEntry:
        pte = space.page_table.get(page)
        if pte is None or not pte.present:
            raise UnmappedRange(f"pid {space.pid}: {page:#x} vanished during advise")
        return pte

    def _find_identical(self, space, page, pte, h, report, clock) -> StableEntry | None:
        """First valid, byte-identical candidate in the chain, both pages protected."""
        frames = self.memory._frames
        content = frames[pte.frame_id].content
        for entry in self.stable.chain(h):
            if entry.hash64 != h:
                continue
            verdict, src_pte = self._probe(entry)
            if verdict is not Verdict.VALID:
                self._drop(entry.key)
                report.stale_candidates_purged += 1
                continue
            if entry.frame_id == pte.frame_id:
                # already backed by this frame; nothing to merge
                return None
            clock.switch(MERGE)
            src_frame = frames[entry.frame_id]
            pte.writable = False
            frames[pte.frame_id].write_protected = True
            src_pte.writable = False
            src_frame.write_protected = True
            if same_content(src_frame.content, content):
                return entry
            report.compare_mismatches += 1
            clock.switch(STABLE_SEARCH)
        return None

    # -- primitives --------------------------------------------------------

    def _probe(self, entry: StableEntry) -> tuple[Verdict, PageTableEntry | None]:
        owner = self.memory._by_mm.get(entry.mm_id)
        pte = owner.page_table.get(entry.vaddr) if owner is not None else None
        if pte is None or not pte.present:
            return Verdict.NOT_PRESENT, None
        if pte.frame_id != entry.frame_id:
            return Verdict.FRAME_CHANGED, pte
        if self._hash(self.memory._frames[pte.frame_id].content) != entry.hash64:
            return Verdict.HASH_MISMATCH, pte
        return Verdict.VALID, pte

    def _check(self, entry: StableEntry) -> Verdict:
        return self._probe(entry)[0]

    def verify_entry(self, entry: StableEntry) -> Verdict:
        """Validate a stable entry; stale entries are purged from both tables."""
        with self.lock:
            verdict = self._check(entry)
            if not verdict.valid:
                self._drop(entry.key)
            return verdict

    def write_protect(self, pid: int, vaddr: int) -> None:
        self.memory.write_protect(pid, vaddr)

    def merge_pages(self, target: tuple[int, int], source: StableEntry,
                    expected_frame_id: int | None = None) -> None:
        """Repoint ``target`` = ``(pid, vaddr)`` at ``source``'s frame.

        Both pages must already be write-protected and compared equal. The
        descriptor re-check here catches a CoW fault that slipped in after
        the comparison; the page is then left alone and MergeAborted raised.
        """
        pid, vaddr = target
        with self.lock:
            space = self.memory._spaces.get(pid)
            if space is None:
                raise MergeAborted("target process exited before merge")
            page = self.memory.page_base(vaddr)
            pte = space.page_table.get(page)
            if pte is not None and pte.present and source.frame_id in self.memory._frames:
                current = self.memory._frames[pte.frame_id].content
                if not same_content(current, self.memory._frames[source.frame_id].content):
                    raise MergeAborted("contents differ at merge time")
            self._merge(space, page, source, expected_frame_id)

    def _merge(self, space: AddressSpace, page: int, source: StableEntry,
               expected_frame_id: int | None) -> None:
        # caller holds the lock
        mem = self.memory
        pte = space.page_table.get(page)
        owner = mem._by_mm.get(source.mm_id)
        src_pte = owner.page_table.get(source.vaddr) if owner is not None else None
        if pte is None or not pte.present or src_pte is None or not src_pte.present:
            raise MergeAborted("page unmapped before merge")
        if expected_frame_id is not None and pte.frame_id != expected_frame_id:
            raise MergeAborted("target page changed frame before merge")
        if src_pte.frame_id != source.frame_id:
            raise MergeAborted("source page changed frame before merge")
        old = mem._frames[pte.frame_id]
        new = mem._frames[source.frame_id]
        if pte.writable or src_pte.writable or not (old.write_protected and new.write_protected):
            raise MergeAborted("pages not write-protected")
        # protected pages cannot change in place, so an unchanged frame id
        # means unchanged content since the comparison
        mem._repoint(pte, source.frame_id)
        self.tlb_flushes += 1

    def _record(self, space: AddressSpace, page: int, frame_id: int, h: int) -> None:
        if self.memory._by_mm.get(space.mm_id) is not space:
            return  # exited mid-advise; cleanup already ran
        key = (space.mm_id, page)
        if key in self.reverse:
            self._drop(key)
        self.stable.insert(StableEntry(h, page, space.mm_id, frame_id))
        self.reverse.put(ReverseEntry(space.mm_id, page, space.pid, h))

    def _drop(self, key: tuple[int, int]) -> None:
        entry = self.stable.get(key)
        if entry is not None:
            self.stable.remove(entry)
        self.reverse.remove(key)

    # -- exit ----------------------------------------------------------------

    def _on_exit(self, space: AddressSpace) -> None:
        if space.upm_used:
            self.cleanup_process(space.pid)

    def cleanup_process(self, pid: int) -> CleanupReport:
        """Remove every table entry the process added, found via the reversed table."""
        with self.lock:
            reverse_removed = stable_removed = 0
            for rev in self.reverse.for_pid(pid):
                entry = self.stable.get(rev.key)
                if entry is not None:
                    self.stable.remove(entry)
                    stable_removed += 1
                self.reverse.remove(rev.key)
                reverse_removed += 1
            return CleanupReport(reverse_removed, stable_removed)

    # -- accounting ------------------------------------------------------------

    def table_overhead(self) -> OverheadReport:
        with self.lock:
            n_stable, n_reverse = len(self.stable), len(self.reverse)
        static = self.table_config.static_bytes
        return OverheadReport(
            bucket_count=self.table_config.bucket_count,
            static_bytes=static,
            per_entry_bytes=STABLE_ENTRY_BYTES + REVERSE_ENTRY_BYTES,
            live_entries=n_reverse,
            total_bytes=static + STABLE_ENTRY_BYTES * n_stable + REVERSE_ENTRY_BYTES * n_reverse,
        )

    def table_state(self) -> tuple[frozenset, frozenset]:
        """Hashable picture of both tables, for before/after comparisons."""
        with self.lock:
            stable = frozenset((e.hash64, e.vaddr, e.mm_id, e.frame_id) for e in self.stable)
            reverse = frozenset((e.mm_id, e.vaddr, e.pid, e.hash64) for e in self.reverse)
        return stable, reverse

    def check_invariants(self) -> None:
        """Table bijection plus the memory-side full scan."""
        with self.lock:
            self.memory.check_invariants()
            stable_keys = {e.key for e in self.stable}
            reverse_keys = {e.key for e in self.reverse}
            if stable_keys != reverse_keys:
                raise InvariantViolation(
                    f"tables disagree: {len(stable_keys)} stable vs {len(reverse_keys)} reverse")
            for rev in self.reverse:
                owner = self.memory.space_by_mm(rev.mm_id)
                if owner is None or owner.pid != rev.pid:
                    raise InvariantViolation(f"reverse entry {rev.key} outlived its process")
