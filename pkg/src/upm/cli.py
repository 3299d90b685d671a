"""Command line front end: ``upm sim | timing | analyze | gen-snapshot | overhead``.

Every command writes one report envelope (JSON) or a flat CSV table. The
envelope echoes the resolved configuration; feeding a JSON envelope back
to ``upm sim`` as its config file re-runs the same experiment.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import traceback
from datetime import datetime, timezone
from pathlib import Path

from upm import __version__
from upm.errors import InvariantViolation, UPMError
from upm.metrics import phase_breakdown
from upm.snapshot import DEFAULT_SEGMENT_SIZE, classify, load_snapshot, subpage_similarity, write_snapshot
from upm.tables import MiB, TableConfig
from upm.workload import ScenarioConfig, generate_snapshots, run_scenario

SCHEMA_VERSION = 1
EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


def envelope(command: str, config: dict, payload: dict, timings: dict | None = None) -> dict:
    return {
        "tool": "upm",
        "version": __version__,
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "config": config,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "payload": payload,
        "timings": timings or {},
    }


def _csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def sim_csv(payload: dict) -> str:
    header = ["container", "sample", "pid", "rss_bytes", "private_bytes", "pss_bytes"]
    rows = []
    for c in payload["containers"]:
        for i, s in enumerate(c["samples"]):
            rows.append([c["container"], i, s["pid"], s["rss_bytes"], s["private_bytes"],
                         s["pss_bytes"]])
    return _csv(header, rows)


def analyze_csv(payload: dict) -> str:
    row = dict(payload["sharing"])
    for bin_, count in payload.get("subpage", {}).items():
        row[f"subpage_{bin_}"] = count
    return _csv(list(row), [list(row.values())])


def timing_csv(payload: dict) -> str:
    header = ["container_index", "insert_count", "merge_count"]
    return _csv(header, [[p[h] for h in header] for p in payload["curve"]])


def _emit(args, env: dict, to_csv) -> None:
    text = to_csv(env["payload"]) if args.format == "csv" else json.dumps(env, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


def _mb(value: str) -> int:
    return round(float(value) * MiB)


def resolve_scenario(args) -> ScenarioConfig:
    config = ScenarioConfig()
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        if path.suffix == ".json":
            config = config.updated(json.loads(path.read_text())["config"])
        else:
            config = ScenarioConfig.from_file(path)
    overrides = {
        "content_seed": args.seed,
        "container_count": args.containers,
        "shared_region_bytes": None if args.shared_mb is None else _mb(args.shared_mb),
        "private_region_bytes": None if args.private_mb is None else _mb(args.private_mb),
        "warm_invocations_per_container": getattr(args, "invocations", None),
    }
    config = config.updated({k: v for k, v in overrides.items() if v is not None})
    if getattr(args, "no_advise", False):
        config = config.updated({"advise_on_cold": False})
    if getattr(args, "concurrent", False):
        config = config.updated({"launch_mode": "concurrent"})
    config.validate()
    return config


def cmd_sim(args) -> int:
    config = resolve_scenario(args)
    report = run_scenario(config)
    _emit(args, envelope("sim", config.to_dict(), report.payload(), report.timings()), sim_csv)
    return EXIT_OK


def cmd_timing(args) -> int:
    config = resolve_scenario(args).updated({"advise_on_cold": True, "launch_mode": "sequential"})
    report = run_scenario(config)
    curve = [
        {"container_index": c + 1, "insert_count": r.pages_inserted, "merge_count": r.pages_merged}
        for c, r in enumerate(report.advise_reports) if r is not None
    ]
    timings = {
        "advise_time": [t.advise_time for t in report.cold_timings],
        "function_time": [t.function_time for t in report.cold_timings],
        "phase_breakdown": phase_breakdown(r for r in report.advise_reports if r is not None),
    }
    _emit(args, envelope("timing", config.to_dict(), {"curve": curve}, timings), timing_csv)
    return EXIT_OK


def cmd_analyze(args) -> int:
    a, b = load_snapshot(args.snap_a), load_snapshot(args.snap_b)
    payload = {"sharing": classify(a, b).to_dict()}
    if args.subpage:
        hist = subpage_similarity(a, b, args.segment_size)
        payload["subpage"] = {str(k): v for k, v in hist.items()}
        payload["subpage_method"] = "best match over snapshot B, aligned fixed-size segments"
    config = {"snap_a": str(args.snap_a), "snap_b": str(args.snap_b),
              "subpage": args.subpage, "segment_size": args.segment_size}
    _emit(args, envelope("analyze", config, payload), analyze_csv)
    return EXIT_OK


def cmd_gen_snapshot(args) -> int:
    args.seed = args.containers = args.shared_mb = args.private_mb = None
    config = resolve_scenario(args)
    written = []
    for i, snap in enumerate(generate_snapshots(config)):
        path = Path(f"{args.out}-{i}.snap")
        write_snapshot(snap, path)
        written.append(str(path))
    sys.stdout.write("\n".join(written) + "\n")
    return EXIT_OK


def cmd_overhead(args) -> int:
    table = TableConfig(_mb(args.budget_mb), args.page_size)
    payload = {"bucket_count": table.bucket_count, "static_bytes": table.static_bytes,
               "entry_bytes_per_table": 48, "per_page_ratio": 48 / args.page_size}
    config = {"budget_mb": args.budget_mb, "page_size": args.page_size}
    args.format, args.out = "json", None
    _emit(args, envelope("overhead", config, payload), None)
    return EXIT_OK


def _scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("config", nargs="?", help="key = value scenario file, or a JSON report envelope")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.add_argument("--seed", type=int)
    p.add_argument("--containers", type=int)
    p.add_argument("--shared-mb", help="shared (advised) region per container, MiB")
    p.add_argument("--private-mb", help="private region per container, MiB")
    p.add_argument("--invocations", type=int, help="warm invocations per container")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"upm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sim", help="run a container scenario")
    _scenario_flags(p)
    p.add_argument("--no-advise", action="store_true")
    p.add_argument("--concurrent", action="store_true")
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("timing", help="per-container advise cost and phase breakdown")
    _scenario_flags(p)
    p.set_defaults(func=cmd_timing)

    p = sub.add_parser("analyze", help="sharing potential between two snapshots")
    p.add_argument("snap_a")
    p.add_argument("snap_b")
    p.add_argument("--subpage", action="store_true", help="also report sub-page similarity")
    p.add_argument("--segment-size", type=int, default=DEFAULT_SEGMENT_SIZE)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gen-snapshot", help="write one snapshot per simulated container")
    p.add_argument("config")
    p.add_argument("--out", required=True, help="file prefix; writes PREFIX-<i>.snap")
    p.set_defaults(func=cmd_gen_snapshot)

    p = sub.add_parser("overhead", help="modeled static table size for a budget")
    p.add_argument("--budget-mb", default="200")
    p.add_argument("--page-size", type=int, default=4096)
    p.set_defaults(func=cmd_overhead)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvariantViolation as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        traceback.print_exc(file=sys.stderr)
        return EXIT_INTERNAL
    except (UPMError, OSError, ValueError, KeyError) as exc:
        print(f"upm {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
