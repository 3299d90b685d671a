"""RSS / private / PSS accounting, system memory, and advise phase breakdowns.

PSS is kept as an exact :class:`~fractions.Fraction` so that per-process
values partition the live frame bytes exactly; it is rounded to whole
bytes only when serialized.
"""

from __future__ import annotations

from collections import Counter
from collections.abc import Iterable
from dataclasses import dataclass
from fractions import Fraction

from upm.address_space import AddressSpace, MemorySystem
from upm.engine import PHASES, AdviseReport, UPMEngine
from upm.errors import NoSamples

OTHER = "other"
SHARING = "sharing"
SHARING_AND_MERGING = "sharing_and_merging"


@dataclass(frozen=True)
class MemoryAccounting:
    pid: int
    rss_bytes: int
    private_bytes: int
    pss_bytes: Fraction

    def to_dict(self) -> dict:
        return {
            "pid": self.pid,
            "rss_bytes": self.rss_bytes,
            "private_bytes": self.private_bytes,
            "pss_bytes": round(self.pss_bytes),
        }


@dataclass(frozen=True)
class SystemAccounting:
    live_frame_bytes: int
    engine_overhead_bytes: int

    @property
    def total_bytes(self) -> int:
        return self.live_frame_bytes + self.engine_overhead_bytes

    def to_dict(self) -> dict:
        return {
            "live_frame_bytes": self.live_frame_bytes,
            "engine_overhead_bytes": self.engine_overhead_bytes,
            "total_bytes": self.total_bytes,
        }


def _account(memory: MemorySystem, space: AddressSpace) -> MemoryAccounting:
    ps = memory.page_size
    frames = memory._frames
    by_refcount: Counter[int] = Counter()
    for pte in space.page_table.values():
        if pte.present:
            by_refcount[frames[pte.frame_id].refcount] += 1
    rss = ps * sum(by_refcount.values())
    private = ps * by_refcount[1]
    pss = Fraction(private)
    for k, count in by_refcount.items():
        if k > 1:
            pss += Fraction(ps * count, k)
    return MemoryAccounting(space.pid, rss, private, pss)


def pss(memory: MemorySystem, pid: int) -> MemoryAccounting:
    with memory.lock:
        return _account(memory, memory._space(pid))


def system_memory(memory: MemorySystem, engine: UPMEngine | None = None) -> SystemAccounting:
    with memory.lock:
        overhead = engine.table_overhead().total_bytes if engine is not None else 0
        return SystemAccounting(memory.live_frame_bytes, overhead)


def snapshot(memory: MemorySystem, engine: UPMEngine | None = None
             ) -> tuple[dict[int, MemoryAccounting], SystemAccounting]:
    """Per-process and system figures taken atomically under one lock hold."""
    with memory.lock:
        per_process = {pid: _account(memory, space) for pid, space in memory._spaces.items()}
        return per_process, system_memory(memory, engine)


def sharing_savings(memory: MemorySystem) -> int:
    """Bytes that would be needed without sharing: sum of RSS minus live frames."""
    with memory.lock:
        return sum((f.refcount - 1) * memory.page_size for f in memory._frames.values())


def _profile(reports: list[AdviseReport]) -> dict[str, float]:
    total = sum(r.elapsed for r in reports)
    sums = {p: sum(r.phase_timings[p] for r in reports) for p in PHASES}
    sums[OTHER] = max(0.0, total - sum(sums.values()))
    denom = sum(sums.values())
    if denom <= 0:
        raise NoSamples("advise calls recorded no elapsed time")
    return {name: round(100.0 * t / denom, 2) for name, t in sums.items()}


def phase_breakdown(window: Iterable[AdviseReport]) -> dict[str, dict[str, float]]:
    """Percent of advise time per phase, split into insert- and merge-dominated calls.

    Lock waits are booked exclusively (not inside the enclosing phase), so
    each profile's rows add up to 100 up to rounding.
    """
    reports = [r for r in window if r.pages_scanned > 0]
    if not reports:
        raise NoSamples("no completed advise calls in the window")
    groups = {
        SHARING: [r for r in reports if not r.merging],
        SHARING_AND_MERGING: [r for r in reports if r.merging],
    }
    return {name: _profile(group) for name, group in groups.items() if group}
