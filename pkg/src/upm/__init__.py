"""User-guided page merging: dedup engine, memory simulator and analysis tools."""

from upm.address_space import IN_PLACE, MemorySystem, WriteOutcome
from upm.engine import AdviseReport, EngineConfig, UPMEngine, Verdict, compute_hash
from upm.metrics import phase_breakdown, pss, system_memory
from upm.snapshot import Snapshot, classify, dedup_potential, load_snapshot, subpage_similarity
from upm.workload import ScenarioConfig, madvise_timing_curve, run_scenario

__version__ = "0.1.0"

__all__ = [
    "IN_PLACE",
    "AdviseReport",
    "EngineConfig",
    "MemorySystem",
    "ScenarioConfig",
    "Snapshot",
    "UPMEngine",
    "Verdict",
    "WriteOutcome",
    "classify",
    "compute_hash",
    "dedup_potential",
    "load_snapshot",
    "madvise_timing_curve",
    "phase_breakdown",
    "pss",
    "run_scenario",
    "subpage_similarity",
    "system_memory",
]
