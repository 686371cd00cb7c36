"""Train one variant, evaluate it and draw the loss curves.

    python3 scripts/train_and_eval.py --variant dest --out runs/dest
"""

import argparse
import sys
from pathlib import Path

from psumml.cli import main as cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--variant", default="dest", choices=["pcl", "dpca", "dest", "dest-nomod"])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--config", default=None)
    ap.add_argument("--out", default="runs/single")
    args = ap.parse_args()

    out = Path(args.out)
    common = ["--seed", str(args.seed)] + (["--config", args.config] if args.config else [])
    data = out / "data"
    steps = ["--steps", str(args.steps)] if args.steps else []
    for argv in (
        ["gen-data", *common, "--out", str(data)],
        ["train", *common, "--data", str(data), "--variant", args.variant, "--out", str(out / "run"), *steps],
    ):
        if code := cli(argv):
            return code
    ckpt = max((out / "run").glob("ckpt_*"), key=lambda p: int(p.name.split("_")[1]))
    if code := cli(["eval", *common, "--checkpoint", str(ckpt), "--data", str(data), "--out", str(out / "run" / "eval")]):
        return code
    return cli(["report", "--run", str(out / "run")])


if __name__ == "__main__":
    sys.exit(main())
