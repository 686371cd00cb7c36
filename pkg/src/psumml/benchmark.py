"""End-to-end trend benchmark: PCL vs +DPCA vs DEST on the default phantom scenario."""

from __future__ import annotations

import json
import logging
from dataclasses import replace
from pathlib import Path

import numpy as np

from .labels import ScenarioSpec
from .synth import PhantomConfig, build_dataset, default_styles, load_dataset
from .trainer import ABLATION_ROWS, TrainConfig, ablation_suite

log = logging.getLogger(__name__)

TREND_ROWS = [r for r in ABLATION_ROWS if r[0] in ("PCL", "+DPCA", "DEST [K=4]")]
DEFAULT_SCENARIO = ScenarioSpec.from_organs([1, 3], [2, 4])


def run_seed(seed: int, workdir, cfg: TrainConfig | None = None, n_per_modality: int = 250, styles=None) -> dict:
    """Partial-class test Dice (percent) per variant and modality for one seed."""
    data_dir = Path(workdir) / f"data_seed{seed}"
    if not (data_dir / "manifest.json").exists():
        build_dataset(DEFAULT_SCENARIO, PhantomConfig(seed=seed), styles or default_styles(), n_per_modality, data_dir)
    ds = load_dataset(data_dir)
    cfg = replace(cfg or TrainConfig(), seed=seed)
    rows = ablation_suite(ds, cfg, rows=TREND_ROWS)
    out = {}
    for r in rows:
        if r.error:
            raise RuntimeError(f"{r.name} failed: {r.error}")
        out[r.name] = {
            "partial": {m: 100 * v for m, v in r.partial_dice.items()},
            "all": {m: 100 * v for m, v in r.dice.items()},
            "seconds": r.seconds,
        }
    return out


def run_trend(seeds, workdir, cfg: TrainConfig | None = None, n_per_modality: int = 250) -> dict:
    per_seed = {s: run_seed(s, workdir, cfg, n_per_modality) for s in seeds}
    names = [r[0] for r in TREND_ROWS]
    mean = {
        n: {m: float(np.mean([per_seed[s][n]["partial"][m] for s in seeds])) for m in ("A", "B")}
        for n in names
    }
    return {"per_seed": per_seed, "mean_partial": mean}


if __name__ == "__main__":
    import argparse

    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=2000)
    ap.add_argument("--workdir", default="bench_runs")
    ap.add_argument("--out", default=None)
    a = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    res = run_trend(a.seeds, a.workdir, TrainConfig(total_steps=a.steps))
    text = json.dumps(res, indent=2)
    print(text)
    if a.out:
        Path(a.out).write_text(text)
