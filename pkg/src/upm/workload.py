"""Serverless container scenarios on top of the engine.

Every container is a simulated process holding a private region (distinct
content per container) and a shared region (identical content in every
container, e.g. model weights). The cold invocation maps both and, when
enabled, advises the shared region synchronously. Each warm invocation
rewrites ``volatile_bytes_per_invocation`` bytes with fresh content.

Samples are taken per round: round 0 is the cold start of every container,
round ``i`` the ``i``-th warm invocation of every container.
"""

from __future__ import annotations

import dataclasses
import os
import re
import threading
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from time import perf_counter
from typing import NamedTuple

import numpy as np

from upm.address_space import MemorySystem, read_source
from upm.engine import AdviseReport, EngineConfig, UPMEngine
from upm.errors import BudgetExceeded, InvalidConfig, InvariantViolation
from upm.metrics import MemoryAccounting, SystemAccounting, sharing_savings, snapshot, system_memory
from upm.snapshot import PageKind, Snapshot
from upm.tables import GiB, MiB, OverheadReport

PRIVATE_BASE = 0x5555_0000_0000
SHARED_BASE = 0x7F00_0000_0000

_ROLE_TAGS = {"shared": 1, "private": 2, "volatile": 3}


@dataclass(frozen=True)
class Role:
    kind: str
    container: int = 0
    invocation: int = 0

    @classmethod
    def shared(cls) -> Role:
        return cls("shared")

    @classmethod
    def private(cls, container: int) -> Role:
        return cls("private", container)

    @classmethod
    def volatile(cls, container: int, invocation: int) -> Role:
        return cls("volatile", container, invocation)


class ContentStream:
    """Endless deterministic byte stream for one (seed, role) pair."""

    def __init__(self, seed: int, role: Role):
        entropy = [seed, _ROLE_TAGS[role.kind], role.container, role.invocation]
        self._bits = np.random.PCG64(np.random.SeedSequence(entropy))
        self._spill = b""  # tail of the last 8-byte word, not yet handed out

    def read(self, n: int) -> bytes:
        if n <= len(self._spill):
            out, self._spill = self._spill[:n], self._spill[n:]
            return out
        need = n - len(self._spill)
        fresh = self._bits.random_raw(-(-need // 8)).tobytes()
        out = self._spill + fresh[:need] if self._spill else fresh[:need]
        self._spill = fresh[need:]
        return out


def generate_content(seed: int, role: Role) -> ContentStream:
    return ContentStream(seed, role)


# -- configuration -----------------------------------------------------------

_UNITS = {"": 1, "b": 1, "k": 1 << 10, "kb": 1 << 10, "kib": 1 << 10, "m": MiB, "mb": MiB,
          "mib": MiB, "g": GiB, "gb": GiB, "gib": GiB}
_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*$")


def parse_size(text: str) -> int:
    """``"64MiB"`` -> 67108864. Binary units; fractional values must land on a byte."""
    m = _SIZE_RE.match(text)
    if not m or m.group(2).lower() not in _UNITS:
        raise InvalidConfig(f"cannot parse size {text!r}")
    value = Fraction(m.group(1)) * _UNITS[m.group(2).lower()]
    if value.denominator != 1:
        raise InvalidConfig(f"size {text!r} is not a whole number of bytes")
    return int(value)


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise InvalidConfig(f"cannot parse boolean {text!r}")


@dataclass
class ScenarioConfig:
    container_count: int = 1
    shared_region_bytes: int = 64 * MiB
    private_region_bytes: int = 0
    volatile_bytes_per_invocation: int = 0
    warm_invocations_per_container: int = 5
    advise_on_cold: bool = True
    content_seed: int = 0
    launch_mode: str = "sequential"
    page_size: int = 4096
    budget_bytes: int = 2 * GiB
    volatile_in_shared: bool = False
    shared_source: str | None = None

    _SIZE_KEYS = ("shared_region_bytes", "private_region_bytes",
                  "volatile_bytes_per_invocation", "page_size", "budget_bytes")

    def validate(self) -> None:
        ps = self.page_size
        if ps <= 0 or ps & (ps - 1):
            raise InvalidConfig(f"page_size {ps} is not a power of two")
        if self.container_count < 1:
            raise InvalidConfig("container_count must be at least 1")
        if self.warm_invocations_per_container < 0:
            raise InvalidConfig("warm_invocations_per_container must be >= 0")
        if self.content_seed < 0:
            raise InvalidConfig("content_seed must be >= 0")
        for key in ("shared_region_bytes", "private_region_bytes",
                    "volatile_bytes_per_invocation"):
            value = getattr(self, key)
            if value < 0 or value % ps:
                raise InvalidConfig(f"{key}={value} is not a non-negative multiple of {ps}")
        if self.launch_mode not in ("sequential", "concurrent"):
            raise InvalidConfig(f"unknown launch_mode {self.launch_mode!r}")
        region = self.shared_region_bytes if self.volatile_in_shared else self.private_region_bytes
        if self.volatile_bytes_per_invocation > region:
            raise InvalidConfig("volatile bytes exceed the region they rewrite")
        if self.budget_bytes < ps:
            raise InvalidConfig("budget_bytes must cover at least one page")
        if self.advise_on_cold and self.container_count * self.shared_region_bytes > self.budget_bytes:
            raise BudgetExceeded(
                f"{self.container_count} x {self.shared_region_bytes} advised bytes exceed "
                f"the engine budget of {self.budget_bytes}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_dict().items():
            if value is None:
                continue
            lines.append(f"{key} = {str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def parse(cls, text: str) -> ScenarioConfig:
        return cls().updated(_parse_pairs(text))

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> ScenarioConfig:
        return cls.parse(Path(path).read_text())

    def updated(self, values: dict[str, str | int | bool | None]) -> ScenarioConfig:
        """Copy with ``values`` applied; strings are coerced to the field's type."""
        fields = {f.name: f for f in dataclasses.fields(self)}
        changes = {}
        for key, raw in values.items():
            if key not in fields:
                raise InvalidConfig(f"unknown config key {key!r}")
            if not isinstance(raw, str):
                changes[key] = raw
            elif key in self._SIZE_KEYS:
                changes[key] = parse_size(raw)
            elif fields[key].type == "bool":
                changes[key] = _parse_bool(raw)
            elif fields[key].type == "int":
                try:
                    changes[key] = int(raw)
                except ValueError:
                    raise InvalidConfig(f"{key}: expected an integer, got {raw!r}") from None
            else:
                changes[key] = raw
        return dataclasses.replace(self, **changes)


def _parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        pairs[key] = value
    return pairs


# -- reports -----------------------------------------------------------------

@dataclass
class ColdTiming:
    function_time: float
    advise_time: float


@dataclass
class ScenarioReport:
    config: ScenarioConfig
    pids: list[int]
    samples: list[list[MemoryAccounting]]
    system_before: SystemAccounting
    system_after: SystemAccounting
    cold_timings: list[ColdTiming]
    advise_reports: list[AdviseReport | None]
    advise_calls: int
    cow_faults: int
    savings_bytes: int
    overhead: OverheadReport

    def steady_pss(self, container: int) -> Fraction:
        return self.samples[container][-1].pss_bytes

    @property
    def system_increase(self) -> int:
        return self.system_after.total_bytes - self.system_before.total_bytes

    def payload(self) -> dict:
        """Everything except wall-clock timings; reproducible in sequential mode."""
        return {
            "config": self.config.to_dict(),
            "containers": [
                {
                    "container": c,
                    "pid": self.pids[c],
                    "samples": [s.to_dict() for s in self.samples[c]],
                    "advise": r.counts() if r is not None else None,
                }
                for c, r in enumerate(self.advise_reports)
            ],
            "system_before": self.system_before.to_dict(),
            "system_after": self.system_after.to_dict(),
            "system_increase_bytes": self.system_increase,
            "advise_calls": self.advise_calls,
            "cow_faults": self.cow_faults,
            "savings_bytes": self.savings_bytes,
            "overhead": self.overhead.to_dict(),
        }

    def timings(self) -> dict:
        return {
            "cold": [dataclasses.asdict(t) for t in self.cold_timings],
            "phase_timings": [r.phase_timings if r is not None else None
                              for r in self.advise_reports],
        }


class TimingPoint(NamedTuple):
    container_index: int
    advise_time: float
    insert_count: int
    merge_count: int


# -- simulation --------------------------------------------------------------

class Scenario:
    """One simulated host running ``container_count`` function containers."""

    def __init__(self, config: ScenarioConfig):
        config.validate()
        self.config = config
        self.memory = MemorySystem(config.page_size)
        self.engine = UPMEngine(
            self.memory, EngineConfig(page_size=config.page_size, budget_bytes=config.budget_bytes))
        n = config.container_count
        self.pids: list[int | None] = [None] * n
        self.cold_timings: list[ColdTiming | None] = [None] * n
        self.advise_reports: list[AdviseReport | None] = [None] * n
        self.samples: list[list[MemoryAccounting]] = [[] for _ in range(n)]
        self._shared_bytes: bytes | None = None

    def _shared_source(self) -> bytes:
        # identical in every container, so produce it once
        cfg = self.config
        if self._shared_bytes is None:
            if cfg.shared_source is None:
                source = generate_content(cfg.content_seed, Role.shared())
                self._shared_bytes = source.read(cfg.shared_region_bytes)
            else:
                with open(cfg.shared_source, "rb") as f:
                    self._shared_bytes = read_source(f, cfg.shared_region_bytes)
        return self._shared_bytes

    def cold(self, c: int) -> None:
        cfg, mem = self.config, self.memory
        t0 = perf_counter()
        pid = mem.create_process()
        self.pids[c] = pid
        if cfg.private_region_bytes:
            mem.map_anonymous(pid, PRIVATE_BASE, cfg.private_region_bytes,
                              generate_content(cfg.content_seed, Role.private(c)))
        if cfg.shared_region_bytes:
            mem.map_anonymous(pid, SHARED_BASE, cfg.shared_region_bytes, self._shared_source())
        t1 = perf_counter()
        if cfg.advise_on_cold and cfg.shared_region_bytes:
            self.advise_reports[c] = self.engine.advise(pid, SHARED_BASE, cfg.shared_region_bytes)
        self.cold_timings[c] = ColdTiming(t1 - t0, perf_counter() - t1)

    def warm(self, c: int, invocation: int) -> None:
        cfg = self.config
        if not cfg.volatile_bytes_per_invocation:
            return
        ps = cfg.page_size
        base = SHARED_BASE if cfg.volatile_in_shared else PRIVATE_BASE
        stream = generate_content(cfg.content_seed, Role.volatile(c, invocation))
        for off in range(0, cfg.volatile_bytes_per_invocation, ps):
            self.memory.write(self.pids[c], base + off, stream.read(ps))

    def sample(self) -> None:
        per_process, system = snapshot(self.memory, self.engine)
        total_pss = sum(a.pss_bytes for a in per_process.values())
        if total_pss != system.live_frame_bytes:
            raise InvariantViolation(
                f"PSS sum {total_pss} != live frame bytes {system.live_frame_bytes}")
        for c, pid in enumerate(self.pids):
            self.samples[c].append(per_process[pid])

    def _round(self, c: int, r: int) -> None:
        if r == 0:
            self.cold(c)
        else:
            self.warm(c, r)

    def run(self) -> ScenarioReport:
        cfg = self.config
        n, rounds = cfg.container_count, cfg.warm_invocations_per_container + 1
        system_before = system_memory(self.memory, self.engine)
        if cfg.launch_mode == "sequential":
            for r in range(rounds):
                for c in range(n):
                    self._round(c, r)
                self.sample()
        else:
            self._run_concurrent(n, rounds)
        self.engine.check_invariants()
        return ScenarioReport(
            config=cfg,
            pids=list(self.pids),
            samples=self.samples,
            system_before=system_before,
            system_after=system_memory(self.memory, self.engine),
            cold_timings=list(self.cold_timings),
            advise_reports=list(self.advise_reports),
            advise_calls=self.engine.advise_calls,
            cow_faults=self.memory.cow_faults,
            savings_bytes=sharing_savings(self.memory),
            overhead=self.engine.table_overhead(),
        )

    def _run_concurrent(self, n: int, rounds: int) -> None:
        errors: list[BaseException] = []
        barrier = threading.Barrier(n, action=self.sample)

        def worker(c: int) -> None:
            try:
                for r in range(rounds):
                    self._round(c, r)
                    barrier.wait()
            except threading.BrokenBarrierError:
                pass
            except BaseException as exc:
                errors.append(exc)
                barrier.abort()

        threads = [threading.Thread(target=worker, args=(c,), name=f"container-{c}")
                   for c in range(n)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if errors:
            raise errors[0]
        if any(len(s) != rounds for s in self.samples):
            raise InvariantViolation("concurrent run lost samples")


def run_scenario(config: ScenarioConfig) -> ScenarioReport:
    return Scenario(config).run()


def madvise_timing_curve(config: ScenarioConfig) -> list[TimingPoint]:
    """Per-container cold advise time with its insert and merge counts."""
    if not config.advise_on_cold or config.launch_mode != "sequential":
        raise InvalidConfig("timing curve needs advise_on_cold and sequential launch")
    report = run_scenario(config)
    return [
        TimingPoint(c + 1, t.advise_time, r.pages_inserted if r else 0, r.pages_merged if r else 0)
        for c, (t, r) in enumerate(zip(report.cold_timings, report.advise_reports))
    ]


def capture_snapshot(memory: MemorySystem, pid: int) -> Snapshot:
    """Dump a simulated process's pages; all of them are anonymous memory."""
    with memory.lock:
        space = memory.space(pid)
        snap = Snapshot(memory.page_size)
        for vaddr in sorted(space.page_table):
            pte = space.page_table[vaddr]
            snap.add(vaddr, PageKind.ANONYMOUS, bytes(memory.frame(pte.frame_id).content))
    return snap


def generate_snapshots(config: ScenarioConfig) -> list[Snapshot]:
    scenario = Scenario(config)
    scenario.run()
    return [capture_snapshot(scenario.memory, pid) for pid in scenario.pids]
