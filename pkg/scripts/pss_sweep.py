"""Per-container PSS as the number of containers grows, with and without advise.

Prints one CSV row per container count: steady-state PSS of container 0
with and without dedup, the measured reduction and the analytic one,
f * (n - 1) / n with f = S / (S + P).
"""

import argparse
import csv
import sys
from fractions import Fraction

from upm.tables import MiB
from upm.workload import ScenarioConfig, run_scenario


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--shared-mb", type=float, default=64)
    parser.add_argument("--private-mb", type=float, default=37.5)
    parser.add_argument("--counts", default="1,2,4,8,16")
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    S, P = round(args.shared_mb * MiB), round(args.private_mb * MiB)
    f = Fraction(S, S + P)
    out = csv.writer(sys.stdout)
    out.writerow(["containers", "pss_advise_mib", "pss_baseline_mib",
                  "reduction_pct", "analytic_pct"])
    for n in (int(x) for x in args.counts.split(",")):
        pss = {}
        for advise in (True, False):
            config = ScenarioConfig(container_count=n, shared_region_bytes=S,
                                    private_region_bytes=P, advise_on_cold=advise,
                                    content_seed=args.seed)
            pss[advise] = run_scenario(config).steady_pss(0)
        reduction = 1 - pss[True] / pss[False]
        out.writerow([n, f"{float(pss[True]) / MiB:.3f}", f"{float(pss[False]) / MiB:.3f}",
                      f"{100 * float(reduction):.2f}", f"{100 * float(f * (n - 1) / n):.2f}"])
        sys.stdout.flush()


if __name__ == "__main__":
    main()
