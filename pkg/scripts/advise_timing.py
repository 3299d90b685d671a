"""Cold-start advise cost per container and the phase breakdown of advise calls.

The first container only inserts; every later one merges. Absolute times
depend on the host; the insert/merge counts and the shape do not.
"""

import argparse
import json

from upm.metrics import phase_breakdown
from upm.tables import MiB
from upm.workload import ScenarioConfig, run_scenario


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--containers", type=int, default=16)
    parser.add_argument("--shared-mb", type=float, default=64)
    args = parser.parse_args()

    report = run_scenario(ScenarioConfig(container_count=args.containers,
                                         shared_region_bytes=round(args.shared_mb * MiB),
                                         warm_invocations_per_container=0))
    print("container,advise_s,function_s,inserted,merged")
    for c, (timing, adv) in enumerate(zip(report.cold_timings, report.advise_reports), 1):
        print(f"{c},{timing.advise_time:.4f},{timing.function_time:.4f},"
              f"{adv.pages_inserted},{adv.pages_merged}")
    print()
    print(json.dumps(phase_breakdown(report.advise_reports), indent=2))


if __name__ == "__main__":
    main()
