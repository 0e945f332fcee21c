"""Run shipped experiment plans and write their reports.

With no arguments runs every shipped plan; pass plan names to run a
subset (see `headstrain evaluate --list-plans`). Reports land in
./reports. The transfer plans take a few minutes each on one core; the
sweep plan is the longest.
"""

import sys
import time
from pathlib import Path

from headstrain.evaluation import run_experiments
from headstrain.storage import list_shipped_plans, load_shipped_plan

OUT = Path("reports")


def main(names):
    OUT.mkdir(exist_ok=True)
    for name in names:
        plan = load_shipped_plan(name)
        t0 = time.time()

        def progress(ratios, run_index, name=name):
            print(f"  {name} {ratios}: run {run_index + 1} done", flush=True)

        report = run_experiments(plan, progress=progress)
        path = OUT / f"{plan.name}.json"
        path.write_bytes(report.to_json_bytes())
        print(f"{name}: wrote {path} ({time.time() - t0:.0f}s)", flush=True)


if __name__ == "__main__":
    main(sys.argv[1:] or list_shipped_plans())
