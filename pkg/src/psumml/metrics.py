"""Dice and average symmetric surface distance, plus per-class reports."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage

from .labels import ScenarioSpec
from .model import seg_forward

EMPTY_GT = "empty-gt"
EMPTY_PRED = "empty-pred"
BOTH_EMPTY = "both-empty"

_FOUR_NEIGHBOURS = ndimage.generate_binary_structure(2, 1)


def _check_shapes(pred, gt):
    if np.shape(pred) != np.shape(gt):
        raise ValueError(f"mask shapes differ: {np.shape(pred)} vs {np.shape(gt)}")


def dice_score(pred_mask, gt_mask, class_id: int) -> float:
    _check_shapes(pred_mask, gt_mask)
    p = np.asarray(pred_mask) == class_id
    g = np.asarray(gt_mask) == class_id
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


def surface(binary: np.ndarray) -> np.ndarray:
    """Pixels of the region with at least one 4-neighbour outside it (border is outside)."""
    binary = np.asarray(binary, dtype=bool)
    eroded = ndimage.binary_erosion(binary, structure=_FOUR_NEIGHBOURS, border_value=0)
    return binary & ~eroded


def asd(pred_mask, gt_mask, class_id: int, spacing: float = 1.0) -> tuple[float | None, str | None]:
    """Average symmetric surface distance as ``(value, reason)``; value is None when undefined."""
    _check_shapes(pred_mask, gt_mask)
    if spacing <= 0:
        raise ValueError(f"spacing must be positive, got {spacing}")
    sp = surface(np.asarray(pred_mask) == class_id)
    sg = surface(np.asarray(gt_mask) == class_id)
    if not sp.any() and not sg.any():
        return None, BOTH_EMPTY
    if not sp.any():
        return None, EMPTY_PRED
    if not sg.any():
        return None, EMPTY_GT
    # distance from every pixel to the nearest surface pixel of the other region
    to_g = ndimage.distance_transform_edt(~sg, sampling=spacing)
    to_p = ndimage.distance_transform_edt(~sp, sampling=spacing)
    return 0.5 * (float(to_g[sp].mean()) + float(to_p[sg].mean())), None


@dataclass
class ClassMetrics:
    modality: str
    class_id: int
    dice: float
    asd: float | None
    reason: str | None = None


@dataclass
class MetricsReport:
    entries: list[ClassMetrics]
    sample_count: dict[str, int]
    config: dict = field(default_factory=dict)

    def _by(self, modality, classes=None):
        return [e for e in self.entries if e.modality == modality and (classes is None or e.class_id in classes)]

    def mean_dice(self, modality: str, classes=None) -> float:
        vals = [e.dice for e in self._by(modality, classes)]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_asd(self, modality: str, classes=None) -> float | None:
        vals = [e.asd for e in self._by(modality, classes) if e.asd is not None]
        return float(np.mean(vals)) if vals else None

    def dice(self, modality: str, class_id: int) -> float:
        return self._by(modality, {class_id})[0].dice

    def to_dict(self) -> dict:
        mods = sorted({e.modality for e in self.entries})
        return {
            "classes": [asdict(e) for e in self.entries],
            "means": {m: {"dice": self.mean_dice(m), "asd": self.mean_asd(m)} for m in mods},
            "sample_count": self.sample_count,
            "config": self.config,
        }

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        jpath, cpath = out / "metrics.json", out / "metrics.csv"
        jpath.write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")
        with open(cpath, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["modality", "class", "dice", "asd", "reason"])
            for e in self.entries:
                w.writerow([e.modality, e.class_id, f"{e.dice:.6f}", "" if e.asd is None else f"{e.asd:.6f}", e.reason or ""])
        return jpath, cpath


@torch.no_grad()
def predict(model, images: np.ndarray | torch.Tensor, modality: str, scenario: ScenarioSpec, batch_size: int = 32) -> np.ndarray:
    """Argmax class ids over the full label set, eval mode."""
    if model.num_classes != scenario.num_classes:
        raise ValueError(f"model predicts {model.num_classes} classes, scenario has {scenario.num_classes}")
    was_training = model.training
    model.eval()
    x = torch.as_tensor(images, dtype=torch.float32)
    ids = torch.as_tensor(scenario.global_layout.channel_to_class)
    out = []
    for i in range(0, len(x), batch_size):
        _, probs = seg_forward(model, x[i:i + batch_size], modality)
        out.append(ids[probs.argmax(1)])
    model.train(was_training)
    return torch.cat(out).numpy()


def summarize(preds: dict[str, np.ndarray], gts: dict[str, np.ndarray], scenario: ScenarioSpec, spacing: float = 1.0) -> MetricsReport:
    """Dice pooled over all slices of a split; ASD averaged over slices where defined."""
    entries = []
    for m in sorted(preds):
        pred, gt = preds[m], gts[m]
        for c in scenario.global_set.organs:
            d = dice_score(pred, gt, c)
            vals, reasons = [], []
            for p_i, g_i in zip(pred, gt):
                v, r = asd(p_i, g_i, c, spacing)
                (vals if v is not None else reasons).append(v if v is not None else r)
            a = float(np.mean(vals)) if vals else None
            reason = None if vals else max(set(reasons), key=reasons.count)
            entries.append(ClassMetrics(m, c, d, a, reason))
    return MetricsReport(entries, {m: int(len(preds[m])) for m in preds}, {"spacing": spacing})


def evaluate(model, dataset, scenario: ScenarioSpec, split: str = "test", spacing: float = 1.0) -> MetricsReport:
    """Metrics against the FULL masks of ``split`` for both modalities."""
    if dataset.scenario != scenario:
        raise ValueError("dataset scenario does not match model scenario")
    preds, gts = {}, {}
    for m in ("A", "B"):
        imgs, full, _ = dataset.arrays(m, split)
        preds[m] = predict(model, imgs, m, scenario)
        gts[m] = full
    report = summarize(preds, gts, scenario, spacing)
    report.config["split"] = split
    return report
