"""Generate a phantom dataset and run the seven-row ablation through the CLI.

    python3 scripts/run_ablation.py --seed 0 --out runs/ablation_seed0
"""

import argparse
import sys
from pathlib import Path

from psumml.cli import main as cli


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--config", default=None)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--out", default="runs/ablation")
    args = ap.parse_args()

    out = Path(args.out)
    common = ["--seed", str(args.seed)] + (["--config", args.config] if args.config else [])
    data = out / "data"
    if not (data / "manifest.json").exists():
        code = cli(["gen-data", *common, "--out", str(data)])
        if code:
            return code
    extra = ["--steps", str(args.steps)] if args.steps else []
    return cli(["ablate", *common, "--data", str(data), "--out", str(out), *extra])


if __name__ == "__main__":
    sys.exit(main())
