"""Training losses: marginal partial-class loss, class-conditional adversarial
losses for the discriminators and the encoder, self-training loss and the
weighted total.

Probability maps are ``(N, C, H, W)`` tensors; hard targets are ``(N, H, W)``
integer channel indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn.functional as F

from .labels import ScenarioSpec, local_index, merge_probs

EPS_LOG = 1e-8
EPS_DICE = 1e-5


class LossError(ValueError):
    pass


@dataclass
class LossValue:
    value: torch.Tensor
    pixel_count: int

    def __float__(self):
        return float(self.value)

    @classmethod
    def zero(cls, like: torch.Tensor | None = None) -> "LossValue":
        dtype = like.dtype if like is not None else torch.get_default_dtype()
        return cls(torch.zeros((), dtype=dtype), 0)


@dataclass
class LossWeights:
    lambda_dpca: float = 0.01
    sest_enabled: bool = True

    def __post_init__(self):
        if self.lambda_dpca < 0:
            raise LossError("lambda_dpca must be non-negative")


def _log(q):
    return torch.log(q.clamp(EPS_LOG, 1.0))


def cross_entropy(target: torch.Tensor, pred: torch.Tensor, valid: torch.Tensor | None = None) -> LossValue:
    """Pixel-mean cross entropy. ``target`` is either channel indices or a soft map."""
    if target.dim() == pred.dim() - 1:
        if target.shape != pred.shape[:1] + pred.shape[2:]:
            raise LossError(f"target {tuple(target.shape)} does not match prediction {tuple(pred.shape)}")
        per_pixel = -_log(pred).gather(1, target.long().unsqueeze(1)).squeeze(1)
    else:
        if target.shape != pred.shape:
            raise LossError(f"target {tuple(target.shape)} does not match prediction {tuple(pred.shape)}")
        per_pixel = -(target * _log(pred)).sum(1)
    if valid is None:
        return LossValue(per_pixel.mean(), per_pixel.numel())
    n = int(valid.sum())
    if n == 0:
        return LossValue(per_pixel.sum() * 0.0, 0)
    return LossValue(per_pixel[valid].sum() / n, n)


def dice_loss(target_onehot: torch.Tensor, pred: torch.Tensor) -> LossValue:
    """Soft Dice loss averaged over channels; sums run over batch and pixels."""
    if target_onehot.shape != pred.shape:
        raise LossError(f"target {tuple(target_onehot.shape)} does not match prediction {tuple(pred.shape)}")
    dims = (0,) + tuple(range(2, pred.dim()))
    inter = (pred * target_onehot).sum(dims)
    denom = pred.sum(dims) + target_onehot.sum(dims)
    per_channel = 1.0 - (2.0 * inter + EPS_DICE) / (denom + EPS_DICE)
    return LossValue(per_channel.mean(), pred.numel() // pred.shape[1])


def one_hot(index: torch.Tensor, channels: int, dtype=None) -> torch.Tensor:
    return F.one_hot(index.long(), channels).movedim(-1, 1).to(dtype or torch.get_default_dtype())


def pcl_loss(probs: torch.Tensor, partial_mask: torch.Tensor, scenario: ScenarioSpec, modality: str) -> LossValue:
    """CE + Dice against the marginal prediction where unlabeled classes count as background."""
    labels = scenario.labels(modality)
    bad = set(torch.unique(partial_mask).tolist()) - set(labels.classes)
    if bad:
        raise LossError(f"partial mask for modality {modality} contains unlabeled classes {sorted(bad)}")
    merged, layout = merge_probs(probs, scenario.complement(modality), scenario.global_layout)
    idx = local_index(partial_mask, layout)
    ce = cross_entropy(idx, merged)
    dice = dice_loss(one_hot(idx, len(layout), merged.dtype), merged)
    return LossValue(ce.value + dice.value, ce.pixel_count)


def dpca_disc_targets(probs: torch.Tensor, guard: str, source: str, scenario: ScenarioSpec) -> torch.Tensor:
    """Domain-stacked class-conditional target for the discriminator guarding ``guard``.

    The guard's labeled organs are folded into background; the resulting block sits in
    the first half for data from the other modality and in the second half for data
    from the guard modality. Targets never carry gradient.
    """
    if not scenario.complement(guard):
        raise LossError(f"modality {guard} has no unlabeled classes; no discriminator exists")
    with torch.no_grad():
        block, _ = merge_probs(probs.detach(), scenario.labels(guard).organs, scenario.global_layout)
        zeros = torch.zeros_like(block)
        parts = [zeros, block] if source == guard else [block, zeros]
        return torch.cat(parts, dim=1)


def dpca_discriminator_loss(
    d_out_other: torch.Tensor | None,
    target_other: torch.Tensor | None,
    d_out_guard: torch.Tensor | None,
    target_guard: torch.Tensor | None,
) -> LossValue:
    """Discriminator objective; zero when the guard has no discriminator (``None`` outputs)."""
    if d_out_other is None or d_out_guard is None:
        return LossValue.zero()
    a = cross_entropy(target_other, d_out_other)
    b = cross_entropy(target_guard, d_out_guard)
    return LossValue(a.value + b.value, a.pixel_count + b.pixel_count)


def dpca_encoder_loss(d_out_guard: torch.Tensor | None, flipped_target: torch.Tensor | None) -> LossValue:
    """Encoder objective: guard-modality features should look like the other modality."""
    if d_out_guard is None:
        return LossValue.zero()
    return cross_entropy(flipped_target, d_out_guard)


def sest_loss(probs: torch.Tensor, pseudo) -> LossValue:
    """Cross entropy on pseudo-labeled pixels only, against the full-label prediction."""
    assigned = pseudo.assigned
    if not bool(assigned.any()):
        return LossValue(probs.sum() * 0.0, 0)
    labels = pseudo.labels[assigned]
    allowed = torch.as_tensor(sorted(pseudo.allowed), dtype=labels.dtype)
    if not bool(torch.isin(labels, allowed).all()):
        raise LossError("pseudo label outside the allowed class set")
    idx = local_index(pseudo.labels.masked_fill(~assigned, 0), pseudo.layout)
    return cross_entropy(idx, probs, valid=assigned)


def total_loss(parts: Mapping[str, object], weights: LossWeights) -> LossValue:
    """PCL + lambda * (DPCA_a + DPCA_b) + SEST.

    ``parts`` maps ``pcl``, ``dpca_a``, ``dpca_b`` and ``sest`` to tensors,
    floats or LossValues; missing entries count as zero.
    """
    vals = {}
    count = 0
    for name in ("pcl", "dpca_a", "dpca_b", "sest"):
        v = parts.get(name, 0.0)
        if isinstance(v, LossValue):
            count += v.pixel_count
            v = v.value
        fv = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not isinstance(parts.get(name, 0.0), LossValue) and fv != 0.0:
            count += 1
        if not math.isfinite(fv):
            raise LossError(f"non-finite loss component {name!r}: {fv}")
        vals[name] = v
    out = vals["pcl"] + weights.lambda_dpca * (vals["dpca_a"] + vals["dpca_b"])
    if weights.sest_enabled:
        out = out + vals["sest"]
    if not isinstance(out, torch.Tensor):
        out = torch.tensor(out, dtype=torch.float64)
    return LossValue(out, count)
