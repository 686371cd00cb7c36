"""Alternating discriminator / segmenter optimisation with snapshot self-training."""

from __future__ import annotations

import copy
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .labels import ScenarioSpec
from .losses import (
    LossError,
    LossWeights,
    dpca_disc_targets,
    dpca_discriminator_loss,
    dpca_encoder_loss,
    pcl_loss,
    sest_loss,
    total_loss,
)
from .metrics import evaluate
from .model import (
    MODALITIES,
    SegNet,
    Snapshot,
    build_discriminators,
    disc_forward,
    load_checkpoint,
    save_checkpoint,
    seg_forward,
    snapshot,
)
from .selftrain import SnapshotStore, assign_pseudo, ensemble_soft_label, modulate, snapshot_times

log = logging.getLogger(__name__)

OTHER = {"A": "B", "B": "A"}


class TrainingAborted(RuntimeError):
    def __init__(self, msg, record=None):
        super().__init__(msg)
        self.record = record


@dataclass
class TrainConfig:
    total_steps: int = 2000
    batch_size: int = 8
    optimizer: str = "adam"
    lr_seg: float = 1e-3
    lr_disc: float = 1e-3
    momentum: float = 0.9
    lambda_dpca: float = 0.01
    K: int = 4
    t0_frac: float = 0.5
    tK_frac: float = 0.75
    tau: float = 0.5
    seed: int = 0
    eval_every: int = 500
    out_dir: str | None = None
    use_dpca: bool = True
    use_sest: bool = True
    modulate: bool = True
    width: int = 16
    disc_width: int = 32

    def __post_init__(self):
        if not 0 < self.t0_frac < self.tK_frac < 1:
            raise ValueError("need 0 < t0_frac < tK_frac < 1")
        if self.lr_seg <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.lambda_dpca < 0:
            raise ValueError("lambda_dpca must be non-negative")

    @property
    def t0(self) -> int:
        return int(math.floor(self.t0_frac * self.total_steps))

    @property
    def tK(self) -> int:
        return int(math.floor(self.tK_frac * self.total_steps))

    @property
    def sest_active(self) -> bool:
        return self.use_sest


VARIANTS = {
    "pcl": dict(use_dpca=False, use_sest=False),
    "dpca": dict(use_dpca=True, use_sest=False),
    "dest": dict(use_dpca=True, use_sest=True, modulate=True),
    "dest-nomod": dict(use_dpca=True, use_sest=True, modulate=False),
}


def variant_config(cfg: TrainConfig, variant: str, **overrides) -> TrainConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    return replace(cfg, **VARIANTS[variant], **overrides)


class BatchStream:
    """Endless reshuffled passes over ``n`` indices from a private generator."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size = n, batch_size
        self.gen = torch.Generator().manual_seed(seed)
        self.perm = torch.randperm(n, generator=self.gen)
        self.pos = 0

    def next(self) -> torch.Tensor:
        out = []
        need = self.batch_size
        while need:
            take = min(need, self.n - self.pos)
            out.append(self.perm[self.pos:self.pos + take])
            self.pos += take
            need -= take
            if self.pos == self.n:
                self.perm = torch.randperm(self.n, generator=self.gen)
                self.pos = 0
        return torch.cat(out)

    def state_dict(self):
        return {"gen": self.gen.get_state(), "perm": self.perm.clone(), "pos": self.pos}

    def load_state_dict(self, s):
        self.gen.set_state(s["gen"])
        self.perm = s["perm"].clone()
        self.pos = s["pos"]


def _finite(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


class Trainer:
    def __init__(self, dataset, cfg: TrainConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.scenario: ScenarioSpec = dataset.scenario
        self.weights = LossWeights(cfg.lambda_dpca, cfg.sest_active)

        torch.manual_seed(cfg.seed)
        self.model = SegNet(self.scenario.num_classes, width=cfg.width)
        self.discs = build_discriminators(self.scenario, self.model.feature_channels, cfg.disc_width) if cfg.use_dpca else {}
        self.opt_seg = self._optimizer(self.model.parameters(), cfg.lr_seg)
        disc_params = [p for d in self.discs.values() for p in d.parameters()]
        self.opt_disc = self._optimizer(disc_params, cfg.lr_disc) if disc_params else None

        self.data = {}
        for m in MODALITIES:
            imgs, _, part = dataset.arrays(m, "train")
            self.data[m] = (torch.from_numpy(imgs).float(), torch.from_numpy(part))
        self.streams = {
            m: BatchStream(len(self.data[m][0]), cfg.batch_size, cfg.seed * 1000 + i + 1)
            for i, m in enumerate(MODALITIES)
        }
        self.store = SnapshotStore(cfg.t0, cfg.tK, cfg.K) if cfg.sest_active else None
        self.soft_labels: dict[str, torch.Tensor] | None = None
        self.step = 0
        self.logs: list[dict] = []
        self.model.train()

    def _optimizer(self, params, lr):
        if self.cfg.optimizer == "adam":
            return torch.optim.Adam(params, lr=lr, betas=(self.cfg.momentum, 0.999))
        return torch.optim.SGD(params, lr=lr, momentum=self.cfg.momentum)

    # --- one optimisation step ---------------------------------------------

    def next_batches(self):
        out = {}
        for m in MODALITIES:
            idx = self.streams[m].next()
            x, y = self.data[m]
            out[m] = (x[idx], y[idx], idx)
        return out

    def disc_phase(self, batches) -> dict[str, float]:
        """One update of every discriminator; the segmenter is only read."""
        losses = {m: 0.0 for m in MODALITIES}
        if not self.discs:
            return losses
        with torch.no_grad(), self.model.frozen_stats():
            fwd = {m: seg_forward(self.model, batches[m][0], m) for m in MODALITIES}
        for d in self.discs.values():
            d.requires_grad_(True)
        self.opt_disc.zero_grad(set_to_none=True)
        total = 0.0
        for g, d in self.discs.items():
            o = OTHER[g]
            t_other = dpca_disc_targets(fwd[o][1], g, o, self.scenario)
            t_guard = dpca_disc_targets(fwd[g][1], g, g, self.scenario)
            lv = dpca_discriminator_loss(disc_forward(d, fwd[o][0]), t_other, disc_forward(d, fwd[g][0]), t_guard)
            losses[g] = _finite(lv.value)
            total = total + lv.value
        total.backward()
        self.opt_disc.step()
        return losses

    def seg_phase(self, batches, step: int) -> dict[str, float]:
        """One update of the segmenter on PCL + lambda * encoder DPCA (+ SEST)."""
        for d in self.discs.values():
            d.requires_grad_(False)
        self.opt_seg.zero_grad(set_to_none=True)
        parts = {"pcl": 0.0, "dpca_a": 0.0, "dpca_b": 0.0, "sest": 0.0}
        rec = {}
        sest_on = self.soft_labels is not None and step > self.cfg.tK
        for m in MODALITIES:
            x, y, idx = batches[m]
            feats, probs = seg_forward(self.model, x, m)
            pcl = pcl_loss(probs, y, self.scenario, m).value
            parts["pcl"] = parts["pcl"] + pcl
            rec[f"pcl_{m.lower()}"] = _finite(pcl)
            if m in self.discs:
                flipped = dpca_disc_targets(probs, m, OTHER[m], self.scenario)
                enc = dpca_encoder_loss(disc_forward(self.discs[m], feats), flipped).value
                parts[f"dpca_{m.lower()}"] = enc
            if sest_on:
                soft = self.soft_labels[m][idx]
                scores = modulate(probs, soft) if self.cfg.modulate else soft
                pseudo = assign_pseudo(scores, y, self.scenario, m, self.cfg.tau)
                s = sest_loss(probs, pseudo).value
                parts["sest"] = parts["sest"] + s
                rec[f"pseudo_{m.lower()}"] = pseudo.count
        try:
            tot = total_loss(parts, self.weights).value
        except LossError as e:
            raise TrainingAborted(f"step {step}: {e}", {"step": step, **{k: _finite(v) for k, v in rec.items()}}) from e
        if not math.isfinite(float(tot.detach())):
            raise TrainingAborted(f"non-finite total loss at step {step}")
        tot.backward()
        self.opt_seg.step()
        rec.update({k: _finite(v) for k, v in parts.items()})
        rec["total"] = _finite(tot)
        return rec

    def train_step(self, batches=None) -> dict:
        step = self.step + 1
        batches = batches if batches is not None else self.next_batches()
        t = time.perf_counter()
        d_losses = self.disc_phase(batches)
        rec = {"step": step}
        rec.update(self.seg_phase(batches, step))
        rec["d_a"], rec["d_b"] = d_losses["A"], d_losses["B"]
        for k, v in rec.items():
            if isinstance(v, float) and not math.isfinite(v):
                raise TrainingAborted(f"non-finite {k} at step {step}", rec)
        rec["wall"] = time.perf_counter() - t
        self.step = step
        if self.store is not None and self.store.maybe_capture(self.model, step) and self.store.full:
            self.build_soft_labels()
        return rec

    def train_step_logged(self) -> dict:
        rec = self.train_step()
        self.logs.append(rec)
        return rec

    @torch.no_grad()
    def build_soft_labels(self, chunk: int = 50):
        self.soft_labels = {}
        for m in MODALITIES:
            x = self.data[m][0]
            self.soft_labels[m] = torch.cat(
                [ensemble_soft_label(self.store, self.model, x[i:i + chunk], m) for i in range(0, len(x), chunk)]
            )

    # --- loop, evaluation, checkpoints --------------------------------------

    def run(self, until: int | None = None, log_path=None) -> "Trainer":
        until = self.cfg.total_steps if until is None else until
        out = Path(self.cfg.out_dir) if self.cfg.out_dir else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_path = log_path or out / "train_log.jsonl"
        fh = open(log_path, "a") if log_path else None
        try:
            while self.step < until:
                try:
                    rec = self.train_step()
                except TrainingAborted as e:
                    if fh and e.record:
                        fh.write(json.dumps({**e.record, "aborted": True}) + "\n")
                    raise
                if self.cfg.eval_every and (self.step % self.cfg.eval_every == 0 or self.step == self.cfg.total_steps):
                    rep = evaluate(self.model, self.dataset, self.scenario, "test")
                    for m in MODALITIES:
                        rec[f"val_dice_{m.lower()}"] = rep.mean_dice(m)
                    self.model.train()
                    if out is not None:
                        self.save(out / f"ckpt_{self.step}")
                self.logs.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
        finally:
            if fh:
                fh.close()
        return self

    def state(self) -> dict:
        return {
            "step": self.step,
            "config": asdict(self.cfg),
            "opt_seg": self.opt_seg.state_dict(),
            "opt_disc": self.opt_disc.state_dict() if self.opt_disc else None,
            "streams": {m: s.state_dict() for m, s in self.streams.items()},
            "snapshots": [(s.step, s.state) for s in self.store.snapshots] if self.store else [],
        }

    def save(self, path):
        save_checkpoint(path, self.scenario, self.model, self.discs, extra=self.state())

    def load_state(self, model_state, disc_states, extra):
        self.model.load_state_dict(model_state)
        for m, d in self.discs.items():
            d.load_state_dict(disc_states[m])
        self.opt_seg.load_state_dict(extra["opt_seg"])
        if self.opt_disc is not None:
            self.opt_disc.load_state_dict(extra["opt_disc"])
        for m, s in self.streams.items():
            s.load_state_dict(extra["streams"][m])
        self.step = extra["step"]
        if self.store is not None:
            self.store.snapshots = [Snapshot(t, st) for t, st in extra["snapshots"] if t in self.store.times]
            if self.store.full:
                self.build_soft_labels()

    @classmethod
    def resume(cls, dataset, path, cfg: TrainConfig | None = None) -> "Trainer":
        ck = load_checkpoint(path)
        extra = ck["extra"]
        cfg = cfg or TrainConfig(**extra["config"])
        tr = cls(dataset, cfg)
        tr.load_state(ck["seg_state"], ck["disc_state"], extra)
        tr.model.train()
        return tr

    def fork(self, cfg: TrainConfig, snapshots: dict | None = None) -> "Trainer":
        """A new trainer for ``cfg`` continuing from this trainer's exact state.

        ``snapshots`` maps step -> Snapshot for captures this trainer took on
        behalf of the forked configuration.
        """
        tr = Trainer.__new__(Trainer)
        tr.__dict__.update({k: v for k, v in self.__dict__.items() if k not in ("model", "discs", "opt_seg", "opt_disc", "streams", "logs", "store", "soft_labels", "cfg", "weights")})
        tr.cfg = cfg
        tr.weights = LossWeights(cfg.lambda_dpca, cfg.sest_active)
        tr.model = copy.deepcopy(self.model)
        tr.discs = copy.deepcopy(self.discs)
        tr.opt_seg = tr._optimizer(tr.model.parameters(), cfg.lr_seg)
        # load_state_dict keeps tensors that already match dtype and device; copy so forks
        # do not share Adam moments with the parent
        tr.opt_seg.load_state_dict(copy.deepcopy(self.opt_seg.state_dict()))
        disc_params = [p for d in tr.discs.values() for p in d.parameters()]
        tr.opt_disc = tr._optimizer(disc_params, cfg.lr_disc) if disc_params else None
        if tr.opt_disc is not None:
            tr.opt_disc.load_state_dict(copy.deepcopy(self.opt_disc.state_dict()))
        tr.streams = copy.deepcopy(self.streams)
        tr.logs = [dict(r) for r in self.logs]
        tr.store = SnapshotStore(cfg.t0, cfg.tK, cfg.K) if cfg.sest_active else None
        tr.soft_labels = None
        if tr.store is not None:
            snaps = snapshots or {}
            tr.store.snapshots = [snaps[t] for t in tr.store.times if t in snaps and t <= self.step]
            if tr.store.full:
                tr.build_soft_labels()
        return tr


@dataclass
class TrainResult:
    model: SegNet
    discs: dict
    store: SnapshotStore | None
    logs: list[dict]
    out_dir: str | None = None


def train(dataset, cfg: TrainConfig) -> TrainResult:
    tr = Trainer(dataset, cfg)
    tr.run()
    if cfg.out_dir:
        tr.save(Path(cfg.out_dir) / f"ckpt_{tr.step}")
    return TrainResult(tr.model, tr.discs, tr.store, tr.logs, cfg.out_dir)


# --- ablation ----------------------------------------------------------------

ABLATION_ROWS = [
    ("PCL", "pcl", {}),
    ("+DPCA", "dpca", {}),
    ("DEST [K=4] W/o Mod.", "dest-nomod", {"K": 4}),
    ("DEST [K=1]", "dest", {"K": 1}),
    ("DEST [K=2]", "dest", {"K": 2}),
    ("DEST [K=4]", "dest", {"K": 4}),
    ("DEST [K=8]", "dest", {"K": 8}),
]


@dataclass
class AblationRow:
    name: str
    variant: str
    K: int | None
    dice: dict = field(default_factory=dict)
    partial_dice: dict = field(default_factory=dict)
    error: str | None = None
    seconds: float | None = None  # wall time, shared prefix included


def partial_classes(scenario: ScenarioSpec, modality: str) -> set[int]:
    return set(scenario.complement(modality))


def _row_from(model, dataset, name, variant, K, seconds=None) -> AblationRow:
    rep = evaluate(model, dataset, dataset.scenario, "test")
    sc = dataset.scenario
    row = AblationRow(
        name,
        variant,
        K,
        {m: rep.mean_dice(m) for m in MODALITIES},
        {m: rep.mean_dice(m, partial_classes(sc, m)) for m in MODALITIES},
        seconds=seconds,
    )
    log.info("%s: dice %s partial %s (%.0fs)", name, row.dice, row.partial_dice, seconds or 0.0)
    return row


def ablation_suite(dataset, cfg: TrainConfig, rows=ABLATION_ROWS, share_prefix: bool = True) -> list[AblationRow]:
    """Train every ablation variant from the same seed and data order.

    With ``share_prefix`` the adversarial run is trained once up to the last
    snapshot step and forked; until then the variants are step-for-step identical,
    so this only saves compute.
    """
    results: list[AblationRow] = []
    base = replace(cfg, out_dir=None, eval_every=0)
    if not share_prefix:
        for name, variant, over in rows:
            try:
                t = time.perf_counter()
                tr = Trainer(dataset, variant_config(base, variant, **over)).run()
                results.append(_row_from(tr.model, dataset, name, variant, over.get("K"), time.perf_counter() - t))
            except Exception as e:  # noqa: BLE001 - one failed variant must not sink the suite
                log.exception("variant %s failed", name)
                results.append(AblationRow(name, variant, over.get("K"), error=repr(e)))
        return results

    adversarial = [(n, v, o) for n, v, o in rows if v != "pcl"]
    captures: dict[int, object] = {}
    needed = set()
    for _, v, o in adversarial:
        vc = variant_config(base, v, **o)
        if vc.sest_active:
            try:
                needed.update(snapshot_times(vc.t0, vc.tK, vc.K))
            except ValueError:
                pass  # reported when that variant is built
    prefix = None
    prefix_error = None
    t = time.perf_counter()
    try:
        prefix = Trainer(dataset, variant_config(base, "dpca"))
        while prefix.step < base.tK:
            prefix.train_step_logged()
            if prefix.step in needed:
                captures[prefix.step] = snapshot(prefix.model, prefix.step)
    except Exception as e:  # noqa: BLE001
        log.exception("shared prefix failed")
        prefix_error = repr(e)
    prefix_seconds = time.perf_counter() - t

    for name, variant, over in rows:
        try:
            vc = variant_config(base, variant, **over)
            t = time.perf_counter()
            if variant == "pcl":
                tr = Trainer(dataset, vc).run()
                spent = 0.0
            else:
                if prefix_error:
                    raise RuntimeError(f"shared prefix failed: {prefix_error}")
                tr = prefix.fork(vc, captures).run()
                spent = prefix_seconds
            spent += time.perf_counter() - t
            results.append(_row_from(tr.model, dataset, name, variant, over.get("K"), spent))
        except Exception as e:  # noqa: BLE001
            log.exception("variant %s failed", name)
            results.append(AblationRow(name, variant, over.get("K"), error=repr(e)))
    return results


def ablation_table(rows: list[AblationRow]) -> tuple[str, str]:
    """(csv text, markdown text). Columns: variant, MRI-analogue (A) and CT-analogue (B) Dice."""
    header = ["variant", "dice_A", "dice_B", "partial_dice_A", "partial_dice_B"]
    lines = [",".join(header)]
    md = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    for r in rows:
        if r.error:
            cells = [r.name] + ["FAILED"] * 4
        else:
            cells = [r.name] + [f"{100 * v:.2f}" for v in (r.dice["A"], r.dice["B"], r.partial_dice["A"], r.partial_dice["B"])]
        lines.append(",".join(cells))
        md.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n", "\n".join(md) + "\n"
