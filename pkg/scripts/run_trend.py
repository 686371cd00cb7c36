"""PCL vs +DPCA vs DEST on the default phantom scenario, averaged over seeds.

Prints partial-class Dice per variant and the observed gaps.

    python3 scripts/run_trend.py --seeds 0 1 2 --workdir runs/trend
"""

import argparse
import json
import logging
from pathlib import Path

from psumml.benchmark import run_trend
from psumml.trainer import TrainConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--workdir", default="runs/trend")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    res = run_trend(args.seeds, args.workdir, TrainConfig(total_steps=args.steps))
    Path(args.workdir).mkdir(parents=True, exist_ok=True)
    (Path(args.workdir) / "trend.json").write_text(json.dumps(res, indent=2))

    mean = res["mean_partial"]
    for m in ("A", "B"):
        pcl, dpca, dest = mean["PCL"][m], mean["+DPCA"][m], mean["DEST [K=4]"][m]
        print(f"{m}: PCL {pcl:.2f}  +DPCA {dpca:.2f}  DEST {dest:.2f}  "
              f"gap(+DPCA-PCL) {dpca - pcl:+.2f}  gap(DEST-+DPCA) {dest - dpca:+.2f}")


if __name__ == "__main__":
    main()
