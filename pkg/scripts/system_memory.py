"""System memory growth from launching N containers, with and without advise.

The simulated analog of measuring free memory before and after: live frame
bytes plus the modeled table overhead.
"""

import argparse
import json

from upm.tables import MiB
from upm.workload import ScenarioConfig, run_scenario


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--containers", type=int, default=16)
    parser.add_argument("--shared-mb", type=float, default=64)
    parser.add_argument("--private-mb", type=float, default=37.5)
    args = parser.parse_args()

    S, P = round(args.shared_mb * MiB), round(args.private_mb * MiB)
    rows = {}
    for advise in (True, False):
        report = run_scenario(ScenarioConfig(container_count=args.containers,
                                             shared_region_bytes=S, private_region_bytes=P,
                                             advise_on_cold=advise))
        rows["advise" if advise else "baseline"] = {
            "increase_mib": report.system_increase / MiB,
            "live_frame_mib": report.system_after.live_frame_bytes / MiB,
            "table_overhead_mib": report.overhead.total_bytes / MiB,
        }
    saved = rows["baseline"]["increase_mib"] - rows["advise"]["increase_mib"]
    rows["saved_mib"] = saved
    rows["saved_pct"] = 100 * saved / rows["baseline"]["increase_mib"]
    rows["analytic_saved_mib"] = (args.containers - 1) * S / MiB
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
