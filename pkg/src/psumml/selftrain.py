"""Snapshot-ensembled soft pseudo-labels, modulation and thresholded assignment."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch

from .labels import BACKGROUND, ChannelLayout, ScenarioSpec
from .model import Snapshot, model_from_snapshot, seg_forward, snapshot


def snapshot_times(t0: int, tK: int, K: int) -> list[int]:
    """K equally spaced capture steps in (t0, tK], the last one at tK."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not t0 < tK:
        raise ValueError(f"need t0 < tK, got {t0}, {tK}")
    if tK - t0 < K:
        raise ValueError(f"cannot place {K} distinct snapshots in ({t0}, {tK}]")
    # round half up, independent of Python's banker's rounding
    return [t0 + math.floor(i * (tK - t0) / K + 0.5) for i in range(1, K + 1)]


@dataclass
class SnapshotStore:
    t0: int
    tK: int
    K: int = 4
    snapshots: list[Snapshot] = field(default_factory=list)

    def __post_init__(self):
        self.times = snapshot_times(self.t0, self.tK, self.K)

    @property
    def full(self) -> bool:
        return len(self.snapshots) == self.K

    def maybe_capture(self, model, step: int) -> bool:
        if step not in self.times or any(s.step == step for s in self.snapshots):
            return False
        if self.snapshots and step <= self.snapshots[-1].step:
            raise ValueError("snapshots must be captured in increasing step order")
        self.snapshots.append(snapshot(model, step))
        return True


@torch.no_grad()
def ensemble_soft_label(store: SnapshotStore, template, image: torch.Tensor, modality: str) -> torch.Tensor:
    """Mean of the snapshot predictions, accumulated as a running mean.

    The running form returns exactly the single prediction when all snapshots agree.
    """
    if not store.full:
        raise ValueError(f"snapshot store holds {len(store.snapshots)} of {store.K} snapshots")
    mean = None
    for k, snap in enumerate(store.snapshots, start=1):
        _, probs = seg_forward(model_from_snapshot(template, snap), image, modality)
        mean = probs if mean is None else mean + (probs - mean) / k
    return mean


def modulate(current: torch.Tensor, soft: torch.Tensor) -> torch.Tensor:
    """Elementwise product with the live prediction; deliberately not renormalised."""
    if current.shape != soft.shape:
        raise ValueError(f"shape mismatch {tuple(current.shape)} vs {tuple(soft.shape)}")
    return current.detach() * soft


@dataclass
class PseudoLabelMask:
    labels: torch.Tensor  # global class ids
    assigned: torch.Tensor  # bool
    threshold: float
    allowed: frozenset
    layout: ChannelLayout

    @property
    def count(self) -> int:
        return int(self.assigned.sum())


def assign_pseudo(
    scores: torch.Tensor,
    partial_mask: torch.Tensor,
    scenario: ScenarioSpec,
    modality: str,
    tau: float,
) -> PseudoLabelMask:
    """Hard labels for background-labeled pixels whose best candidate score exceeds ``tau``.

    Candidates are the modality's unlabeled classes plus background; ties go to the
    lowest class id.
    """
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"threshold must lie in (0, 1], got {tau}")
    layout = scenario.global_layout
    candidates = (BACKGROUND,) + tuple(scenario.complement(modality))
    chans = [layout.index_of(c) for c in candidates]
    cand_scores = scores[:, chans]
    best, arg = cand_scores.max(dim=1)
    ids = torch.as_tensor(candidates, dtype=torch.long)[arg]
    assigned = (partial_mask == BACKGROUND) & (best > tau)
    labels = torch.where(assigned, ids, torch.zeros_like(ids))
    return PseudoLabelMask(labels, assigned, float(tau), frozenset(candidates), layout)
