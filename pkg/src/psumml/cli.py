"""Command line entry point: gen-data, train, eval, ablate, report.

Exit codes: 0 ok, 2 config error, 3 I/O error, 4 training failure, 5 evaluation failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, load_config
from .synth import DatasetError, build_dataset, load_dataset

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_TRAIN, EXIT_EVAL = 0, 2, 3, 4, 5

log = logging.getLogger("psumml")


class CommandError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def _threads():
    n = os.environ.get("PSUMML_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def _load_data(path):
    try:
        return load_dataset(path)
    except (DatasetError, OSError) as e:
        raise CommandError(EXIT_IO, f"cannot load dataset {path}: {e}") from e


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    phantom = cfg.data.phantom
    if args.seed is not None:
        phantom = replace(phantom, seed=args.seed)
    out = Path(args.out or Path(cfg.output_dir) / "data")
    try:
        build_dataset(cfg.scenario, phantom, cfg.data.styles, cfg.data.n_per_modality, out)
    except OSError as e:
        raise CommandError(EXIT_IO, str(e)) from e
    print(out / "manifest.json")
    return EXIT_OK


def _train_config(args, cfg):
    from .trainer import variant_config

    over = {}
    if args.seed is not None:
        over["seed"] = args.seed
    if getattr(args, "k", None) is not None:
        over["K"] = args.k
    if getattr(args, "steps", None) is not None:
        over["total_steps"] = args.steps
    try:
        if getattr(args, "variant", None):
            return variant_config(cfg.train, args.variant, **over)
        return replace(cfg.train, **over)
    except ValueError as e:
        raise ConfigError(str(e)) from e


def cmd_train(args) -> int:
    from .trainer import Trainer, TrainingAborted

    cfg = load_config(args.config)
    ds = _load_data(args.data)
    out = Path(args.out or Path(cfg.output_dir) / args.variant)
    tcfg = replace(_train_config(args, cfg), out_dir=str(out))
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "train_log.jsonl").unlink(missing_ok=True)
        tr = Trainer(ds, tcfg).run()
        tr.save(out / f"ckpt_{tr.step}")
        (out / "config.json").write_text(json.dumps({**cfg.to_dict(), "train": tcfg.__dict__}, indent=2, default=str))
    except TrainingAborted as e:
        raise CommandError(EXIT_TRAIN, f"training aborted: {e}") from e
    except OSError as e:
        raise CommandError(EXIT_IO, str(e)) from e
    print(out / f"ckpt_{tr.step}")
    return EXIT_OK


def _overlays(model, ds, out: Path, limit: int = 8):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .metrics import predict

    written = 0
    for m in ("A", "B"):
        imgs, full, _ = ds.arrays(m, "test")
        n = min(limit // 2, len(imgs))
        if n == 0:
            continue
        pred = predict(model, imgs[:n], m, ds.scenario)
        for i in range(n):
            fig, ax = plt.subplots(figsize=(3, 3))
            ax.imshow(imgs[i, 0], cmap="gray", vmin=0, vmax=1)
            for c in ds.scenario.global_set.organs:
                color = plt.cm.tab10(c % 10)
                if (full[i] == c).any():
                    ax.contour(full[i] == c, levels=[0.5], colors=[color], linewidths=1.0)
                if (pred[i] == c).any():
                    ax.contour(pred[i] == c, levels=[0.5], colors=[color], linewidths=1.0, linestyles="dashed")
            ax.set_title(f"{m} {ds.records(m, 'test')[i].sample_id}", fontsize=8)
            ax.axis("off")
            fig.savefig(out / f"overlay_{m}_{i}.png", dpi=80, bbox_inches="tight")
            plt.close(fig)
            written += 1
    return written


def cmd_eval(args) -> int:
    from .metrics import evaluate
    from .model import load_checkpoint

    cfg = load_config(args.config)
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CommandError(EXIT_EVAL, f"checkpoint not found: {ckpt}")
    try:
        payload = load_checkpoint(ckpt)
    except Exception as e:  # noqa: BLE001 - any unreadable checkpoint is an eval failure
        raise CommandError(EXIT_EVAL, f"cannot read checkpoint {ckpt}: {e}") from e
    ds = _load_data(args.data)
    if payload["scenario_spec"] != ds.scenario:
        raise CommandError(EXIT_EVAL, f"checkpoint {ckpt} layout does not match dataset {args.data}")
    out = Path(args.out or ckpt.parent / "eval")
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(payload["seg"], ds, ds.scenario, cfg.eval.split, cfg.eval.spacing)
    report.write(out)
    _overlays(payload["seg"], ds, out)
    print(out / "metrics.json")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .trainer import ablation_suite, ablation_table

    cfg = load_config(args.config)
    ds = _load_data(args.data)
    tcfg = _train_config(args, cfg)
    out = Path(args.out or Path(cfg.output_dir) / "ablation")
    rows = ablation_suite(ds, tcfg)
    csv_text, md_text = ablation_table(rows)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation_table.csv").write_text(csv_text)
        (out / "ablation_table.md").write_text(md_text)
        (out / "ablation_rows.json").write_text(json.dumps([asdict(r) for r in rows], indent=2) + "\n")
    except OSError as e:
        raise CommandError(EXIT_IO, str(e)) from e
    print(md_text, end="")
    if all(r.error for r in rows):
        raise CommandError(EXIT_TRAIN, "every ablation variant failed")
    return EXIT_OK


def cmd_report(args) -> int:
    """Loss curves and a summary for a training run directory."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    run = Path(args.run)
    log_path = run / "train_log.jsonl"
    if not log_path.exists():
        raise CommandError(EXIT_IO, f"no training log at {log_path}")
    recs = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    out = Path(args.out or run)
    out.mkdir(parents=True, exist_ok=True)
    steps = np.array([r["step"] for r in recs])
    fig, ax = plt.subplots(figsize=(6, 4))
    for key in ("pcl", "dpca_a", "dpca_b", "d_a", "d_b", "sest", "total"):
        ax.plot(steps, [r.get(key, 0.0) for r in recs], label=key, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    fig.savefig(out / "loss_curves.png", dpi=100, bbox_inches="tight")
    plt.close(fig)
    lines = [f"# Run {run.name}", "", f"steps: {int(steps.max()) if len(steps) else 0}"]
    evals = [r for r in recs if "val_dice_a" in r]
    if evals:
        lines += ["", "| step | val dice A | val dice B |", "|---|---|---|"]
        lines += [f"| {r['step']} | {100 * r['val_dice_a']:.2f} | {100 * r['val_dice_b']:.2f} |" for r in evals]
    metrics = run / "eval" / "metrics.json"
    if metrics.exists():
        means = json.loads(metrics.read_text())["means"]
        lines += ["", "test means: " + ", ".join(f"{m}: dice {100 * v['dice']:.2f}" for m, v in means.items())]
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    print(out / "summary.md")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory")

    p = argparse.ArgumentParser(prog="psumml", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write a phantom dataset")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="train one variant")
    t.add_argument("--data", required=True)
    t.add_argument("--variant", choices=["pcl", "dpca", "dest", "dest-nomod"], default="dest")
    t.add_argument("--k", type=int, help="number of snapshots")
    t.add_argument("--steps", type=int, help="override total_steps")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", parents=[common], help="run the ablation table")
    a.add_argument("--data", required=True)
    a.add_argument("--steps", type=int, help="override total_steps")
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", parents=[common], help="plot losses and summarise a run")
    r.add_argument("--run", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    _threads()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except CommandError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
