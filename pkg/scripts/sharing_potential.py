"""Sharing potential between two container snapshots.

Generates a pair of snapshots from a scenario (or loads two .snap files)
and prints the content classification and the sub-page histogram.
"""

import argparse
import json

from upm.snapshot import classify, dedup_potential, load_snapshot, subpage_similarity
from upm.tables import MiB
from upm.workload import ScenarioConfig, generate_snapshots


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("snapshots", nargs="*", help="two .snap files; generated if omitted")
    parser.add_argument("--shared-mb", type=float, default=8)
    parser.add_argument("--private-mb", type=float, default=4)
    parser.add_argument("--volatile-mb", type=float, default=1)
    parser.add_argument("--segment-size", type=int, default=1024)
    args = parser.parse_args()

    if args.snapshots:
        a, b = (load_snapshot(p) for p in args.snapshots)
    else:
        config = ScenarioConfig(container_count=2,
                                shared_region_bytes=round(args.shared_mb * MiB),
                                private_region_bytes=round(args.private_mb * MiB),
                                volatile_bytes_per_invocation=round(args.volatile_mb * MiB),
                                advise_on_cold=False)
        a, b = generate_snapshots(config)
    print(json.dumps({
        "sharing": classify(a, b).to_dict(),
        "subpage": subpage_similarity(a, b, args.segment_size),
        "dedup_potential_bytes": dedup_potential([a, b]),
    }, indent=2))


if __name__ == "__main__":
    main()
