"""The ten numbered acceptance criteria.

Each test carries ``@pytest.mark.acceptance(n, title)``; the conftest prints
one PASS/FAIL line per criterion at the end of the run.
"""

import contextlib
import gc
import random
import threading
import time
from fractions import Fraction

import pytest

from oracles import ShadowMemory, brute_force_pss, distinct_contents, sharer_counts
from upm.address_space import MemorySystem
from upm.engine import PHASES, UPMEngine
from upm.metrics import OTHER, SHARING, SHARING_AND_MERGING, phase_breakdown, snapshot
from upm.snapshot import PageKind, Snapshot, classify, subpage_similarity
from upm.tables import MiB, TableConfig
from upm.workload import ScenarioConfig, run_scenario

PS = 4096
S = 64 * MiB
P = 37 * MiB + MiB // 2
SWEEP = (1, 2, 4, 8, 16)

acceptance = pytest.mark.acceptance


@contextlib.contextmanager
def cycle_gc_paused():
    """Like ``timeit``: keep the cycle collector out of timed sections."""
    enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if enabled:
            gc.enable()


# -- shared scenario sweep (criteria 3, 4, 5, 10) ------------------------------


@pytest.fixture(scope="module")
def sweep():
    results = {}
    start = time.perf_counter()
    with cycle_gc_paused():
        for n in SWEEP:
            for advise in (True, False):
                config = ScenarioConfig(container_count=n, shared_region_bytes=S,
                                        private_region_bytes=P, advise_on_cold=advise)
                results[n, advise] = run_scenario(config)
                gc.collect()
    results["elapsed"] = time.perf_counter() - start
    return results


@acceptance(3, "PSS law f(n-1)/n over n in {1,2,4,8,16}")
def test_pss_law(sweep):
    f = Fraction(S, S + P)
    reductions = []
    for n in SWEEP:
        on, off = sweep[n, True], sweep[n, False]
        for c in range(n):
            # reported (byte-rounded) values, as a user would read them
            pss_on = on.samples[c][-1].to_dict()["pss_bytes"]
            pss_off = off.samples[c][-1].to_dict()["pss_bytes"]
            measured = 100 * (1 - pss_on / pss_off)
            expected = 100 * float(f * (n - 1) / n)
            assert abs(measured - expected) <= 0.1, (n, c, measured, expected)
            assert on.steady_pss(c) == P + Fraction(S, n)
            assert pss_off == S + P
        reductions.append(measured)
    steady = [float(sweep[n, True].steady_pss(0)) for n in SWEEP]
    assert all(a > b for a, b in zip(steady, steady[1:]))
    assert all(a < b for a, b in zip(reductions, reductions[1:]))
    print(f"sweep: {sweep['elapsed']:.1f}s")
    assert sweep["elapsed"] < 30, f"sweep took {sweep['elapsed']:.1f}s"


@acceptance(4, "system memory at n=16 and the table overhead model")
def test_system_memory(sweep):
    on, off = sweep[16, True], sweep[16, False]
    pages = S // PS
    static = TableConfig(on.config.budget_bytes, PS).static_bytes
    assert on.overhead.static_bytes == static
    assert on.overhead.live_entries == 16 * pages
    assert on.overhead.total_bytes == static + 96 * 16 * pages
    assert on.system_after.engine_overhead_bytes == on.overhead.total_bytes
    assert off.system_after.engine_overhead_bytes == static

    assert off.system_after.live_frame_bytes - on.system_after.live_frame_bytes == 15 * S
    entry_bytes = on.overhead.total_bytes - off.overhead.total_bytes
    assert off.system_after.total_bytes - on.system_after.total_bytes == 15 * S - entry_bytes
    assert off.system_increase - on.system_increase == 15 * S - entry_bytes

    # sizing model at the 200 MB budget
    table = TableConfig(200 * MiB, PS)
    assert table.bucket_count == 66_560
    assert table.static_bytes == 532_480 == 520 * 1024
    assert on.overhead.per_entry_bytes == 2 * 48
    assert round(100 * 48 / PS, 2) == 1.17


@acceptance(5, "insert-only first container, merge-only followers")
def test_merge_path_asymmetry(sweep):
    reports = sweep[16, True].advise_reports
    pages = S // PS
    first, rest = reports[0], reports[1:]
    assert (first.pages_inserted, first.pages_merged) == (pages, 0)
    assert len(rest) == 15
    for r in rest:
        assert (r.pages_inserted, r.pages_merged) == (0, pages)


@acceptance(10, "phase breakdown structure")
def test_phase_breakdown_structure(sweep):
    breakdown = phase_breakdown(r for r in sweep[16, True].advise_reports if r is not None)
    assert set(breakdown) == {SHARING, SHARING_AND_MERGING}
    for profile in breakdown.values():
        assert set(profile) == set(PHASES) | {OTHER}
        assert len(PHASES) == 6
        assert abs(sum(profile.values()) - 100) <= 0.1
    assert breakdown[SHARING_AND_MERGING]["merge"] > 0
    assert breakdown[SHARING]["merge"] == 0


# -- criterion 1 -----------------------------------------------------------------


@acceptance(1, "10^4 random ops on 8 processes against the shadow oracle")
def test_randomized_stress():
    rng = random.Random(20240601)
    mem = MemorySystem(PS)
    engine = UPMEngine(mem)
    shadow = ShadowMemory(PS)
    palette = [bytes([i]) * PS for i in range(6)] + [rng.randbytes(PS) for _ in range(4)]
    slots = 16
    start = time.perf_counter()

    def spawn():
        pid = mem.create_process()
        shadow.create(pid)
        return pid

    pids = [spawn() for _ in range(8)]

    for step in range(1, 10_001):
        i = rng.randrange(8)
        pid = pids[i]
        mapped = sorted(shadow.pages[pid])
        op = rng.random()
        if op < 0.15 or not mapped:
            free = [s * PS for s in range(slots) if s * PS not in shadow.pages[pid]]
            if free:
                vaddr = rng.choice(free)
                data = rng.choice(palette)
                mem.map_anonymous(pid, vaddr, PS, data)
                shadow.map(pid, vaddr, data)
        elif op < 0.40:
            vaddr = rng.choice(mapped)
            offset = rng.randrange(PS)
            data = rng.choice(palette)[:rng.randint(1, PS - offset)]
            mem.write(pid, vaddr + offset, data)
            shadow.write(pid, vaddr + offset, data)
        elif op < 0.60:
            vaddr = rng.choice(mapped)
            run = 1
            while vaddr + run * PS in shadow.pages[pid] and run < 4:
                run += 1
            engine.advise(pid, vaddr, run * PS)
        elif op < 0.85:
            vaddr = rng.choice(mapped)
            offset = rng.randrange(PS)
            length = rng.randint(1, PS)
            if vaddr + offset + length > vaddr + PS and vaddr + PS not in shadow.pages[pid]:
                length = PS - offset
            assert mem.read(pid, vaddr + offset, length) == shadow.read(pid, vaddr + offset, length)
        elif op < 0.97:
            vaddr = rng.choice(mapped)
            mem.unmap(pid, vaddr, PS)
            shadow.unmap(pid, vaddr, 1)
        else:
            mem.exit_process(pid)
            shadow.exit(pid)
            pids[i] = spawn()

        if step % 100 == 0:
            engine.check_invariants()
            assert sharer_counts(mem) == {f.frame_id: f.refcount for f in mem.frames()}
            assert sum(brute_force_pss(mem).values()) == mem.live_frame_bytes
    shadow.assert_matches(mem)
    # the run must have exercised merging and copy-on-write, not just private pages
    assert sum(r.pages_merged for r in engine.history) > 100
    assert mem.cow_faults > 100
    assert time.perf_counter() - start < 60


# -- criterion 2 -----------------------------------------------------------------


def _grouping_case(seed, total, max_multiplicity):
    rng = random.Random(seed)
    pages = []
    while len(pages) < total:
        content = rng.randbytes(PS)
        pages.extend([content] * min(rng.randint(1, max_multiplicity), total - len(pages)))
    rng.shuffle(pages)

    mem = MemorySystem(PS)
    engine = UPMEngine(mem)
    nproc = rng.randint(1, 12)
    cuts = sorted(rng.sample(range(1, total), nproc - 1)) if nproc > 1 else []
    chunks = [pages[a:b] for a, b in zip([0, *cuts], [*cuts, total])]
    saved = 0
    for chunk in chunks:
        pid = mem.create_process()
        mem.map_anonymous(pid, 0, len(chunk) * PS, b"".join(chunk))
        pos = 0
        while pos < len(chunk):  # advise in uneven slices
            step = rng.randint(1, len(chunk) - pos)
            saved += engine.advise(pid, pos * PS, step * PS).bytes_saved
            pos += step
    distinct = distinct_contents(pages)
    return mem, engine, distinct, saved, total


@acceptance(2, "live frames == distinct contents; bytes_saved exact")
@pytest.mark.parametrize("seed,total,mult", [
    (1, 4096, 8), (2, 4096, 1), (3, 4096, 64), (4, 1000, 3), (5, 17, 17), (6, 2500, 200),
])
def test_content_grouping(seed, total, mult):
    mem, engine, distinct, saved, total = _grouping_case(seed, total, mult)
    assert mem.frame_count == distinct
    assert saved == (total - distinct) * PS
    engine.check_invariants()


# -- criterion 6 -----------------------------------------------------------------


@acceptance(6, "re-advise is idempotent; one stale replacement per modified page")
def test_idempotence_and_staleness():
    rng = random.Random(6)
    mem = MemorySystem(PS)
    engine = UPMEngine(mem)
    palette = [rng.randbytes(PS) for _ in range(64)]
    npages = 256
    pids = []
    for _ in range(4):
        pid = mem.create_process()
        mem.map_anonymous(pid, 0, npages * PS, b"".join(rng.choice(palette) for _ in range(npages)))
        engine.advise(pid, 0, npages * PS)
        pids.append(pid)

    state, frames = engine.table_state(), mem.frame_count
    for pid in pids:
        report = engine.advise(pid, 0, npages * PS)
        assert report.pages_skipped_unchanged == npages
        assert report.pages_inserted == report.pages_merged == report.stale_entries_replaced == 0
    assert engine.table_state() == state
    assert mem.frame_count == frames

    for pid in pids:
        modified = rng.sample(range(npages), rng.randint(1, 40))
        for p in modified:
            mem.write(pid, p * PS + rng.randrange(PS - 8), rng.randbytes(8))
        report = engine.advise(pid, 0, npages * PS)
        assert report.stale_entries_replaced == len(modified)
        assert report.pages_skipped_unchanged == npages - len(modified)
        engine.check_invariants()


# -- criterion 7 -----------------------------------------------------------------


@acceptance(7, "every process exits -> empty tables, zero frames")
@pytest.mark.parametrize("seed", range(5))
def test_exit_cleanup_totality(seed):
    rng = random.Random(seed)
    mem = MemorySystem(PS)
    engine = UPMEngine(mem)
    palette = [bytes([i]) * PS for i in range(8)]
    pids = []
    for _ in range(rng.randint(2, 10)):
        pid = mem.create_process()
        n = rng.randint(1, 32)
        mem.map_anonymous(pid, 0, n * PS, b"".join(rng.choice(palette) for _ in range(n)))
        for _ in range(rng.randint(0, 4)):
            a = rng.randrange(n)
            b = rng.randint(a + 1, n)
            engine.advise(pid, a * PS, (b - a) * PS)
        for _ in range(rng.randint(0, 4)):
            mem.write(pid, rng.randrange(n) * PS, b"dirty")
        if n > 1 and rng.random() < 0.5:
            mem.unmap(pid, (n - 1) * PS, PS)
        pids.append(pid)
    rng.shuffle(pids)
    for pid in pids:
        mem.exit_process(pid)
    assert len(engine.stable) == 0
    assert len(engine.reverse) == 0
    assert mem.frame_count == 0


# -- criterion 8 -----------------------------------------------------------------


@acceptance(8, "16 threads for 10 s with the compare-to-merge hook")
def test_concurrent_stress():
    duration, workers, slots = 10.0, 16, 16
    mem = MemorySystem(PS)
    engine = UPMEngine(mem)
    palette = [bytes([i]) * PS for i in range(6)]
    local = threading.local()
    errors: list[BaseException] = []
    aborted = [0] * workers
    deadline = time.monotonic() + duration

    def hook(pid, vaddr):
        # runs in the advising thread, between byte-compare and merge
        if local.rng.random() < 0.3:
            data = local.rng.choice(palette)
            mem.write(pid, vaddr, data)
            local.shadow[vaddr] = data

    engine.interleave_hook = hook

    def spawn(rng):
        pid = mem.create_process()
        shadow = {s * PS: rng.choice(palette) for s in range(slots)}
        for vaddr, data in shadow.items():
            mem.map_anonymous(pid, vaddr, PS, data)
        return pid, shadow

    def worker(idx):
        rng = local.rng = random.Random(idx)
        try:
            pid, local.shadow = spawn(rng)
            while time.monotonic() < deadline:
                op = rng.random()
                if op < 0.35:
                    a = rng.randrange(slots)
                    b = rng.randint(a + 1, slots)
                    aborted[idx] += engine.advise(pid, a * PS, (b - a) * PS).merges_aborted
                elif op < 0.65:
                    vaddr = rng.randrange(slots) * PS
                    data = rng.choice(palette)
                    mem.write(pid, vaddr, data)
                    local.shadow[vaddr] = data
                elif op < 0.97:
                    vaddr = rng.randrange(slots) * PS
                    assert mem.read(pid, vaddr, PS) == local.shadow[vaddr], (pid, vaddr)
                else:
                    mem.exit_process(pid)
                    pid, local.shadow = spawn(rng)
            for vaddr, data in local.shadow.items():
                assert mem.read(pid, vaddr, PS) == data
        except BaseException as exc:  # surfaced by the main thread
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(workers)]
    for t in threads:
        t.start()
    checks = 0
    while any(t.is_alive() for t in threads):
        per_process, system = snapshot(mem, engine)
        assert sum(a.pss_bytes for a in per_process.values()) == system.live_frame_bytes
        checks += 1
        time.sleep(0.05)
    for t in threads:
        t.join()
    if errors:
        raise errors[0]
    engine.check_invariants()
    print(f"concurrency: {sum(aborted)} merges aborted, {checks} partition checks")
    assert checks > 10
    assert sum(aborted) >= 1


# -- criterion 9 -----------------------------------------------------------------


def _composition_pair(rng, anon, file, cache, volatile):
    a, b = Snapshot(PS), Snapshot(PS)
    kinds = ([PageKind.ANONYMOUS] * anon + [PageKind.FILE_BACKED] * file
             + [PageKind.FILE_BACKED_CACHE_SHARED] * cache)
    a_pages = [(k, c) for k, c in ((k, rng.randbytes(PS)) for k in kinds)]
    b_pages = list(a_pages)
    a_pages += [(PageKind.ANONYMOUS, rng.randbytes(PS)) for _ in range(volatile)]
    b_pages += [(PageKind.ANONYMOUS, rng.randbytes(PS)) for _ in range(volatile)]
    rng.shuffle(a_pages)
    rng.shuffle(b_pages)
    for i, (k, c) in enumerate(a_pages):
        a.add(i * PS, k, c)
    for i, (k, c) in enumerate(b_pages):
        b.add((i + 7) * PS, k, c)  # different layout, like another ASLR draw
    return a, b


@acceptance(9, "analyzer ground truth: 27/13/10/50 and 2-of-4 sub-page")
def test_analyzer_ground_truth():
    rng = random.Random(9)
    a, b = _composition_pair(rng, 270, 130, 100, 500)
    report = classify(a, b)
    assert report.total_pages == 1000
    assert (report.shareable_anonymous_pages, report.shareable_file_backed_pages,
            report.cache_shared_pages, report.volatile_pages) == (270, 130, 100, 500)
    pct = report.percentages
    assert (pct["shareable_anonymous"], pct["shareable_file_backed"],
            pct["cache_shared"], pct["volatile"]) == (27.0, 13.0, 10.0, 50.0)

    # every page of `a` shares exactly 2 of its 4 aligned segments with one page of `b`
    seg = PS // 4
    sa, sb = Snapshot(PS), Snapshot(PS)
    for i in range(200):
        base = rng.randbytes(PS)
        keep = rng.sample(range(4), 2)
        mixed = b"".join(base[j * seg:(j + 1) * seg] if j in keep else rng.randbytes(seg)
                         for j in range(4))
        sb.add(i * PS, PageKind.ANONYMOUS, base)
        sa.add(i * PS, PageKind.ANONYMOUS, mixed)
    assert subpage_similarity(sa, sb, seg) == {0: 0, 25: 0, 50: 200, 75: 0, 100: 0}
