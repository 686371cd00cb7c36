"""Label-set bookkeeping and the background-merge operator.

Every class id is global; 0 is background and is shared by all label sets.
Probability maps are torch tensors with the channel axis at position -3,
i.e. ``(C, H, W)`` or ``(N, C, H, W)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch

BACKGROUND = 0


class LabelError(ValueError):
    """Invalid label set, layout or class id."""


@dataclass(frozen=True)
class LabelSet:
    classes: tuple[int, ...]

    def __post_init__(self):
        cls = tuple(int(c) for c in self.classes)
        object.__setattr__(self, "classes", cls)
        if not cls or cls[0] != BACKGROUND:
            raise LabelError(f"label set must start with background 0, got {cls}")
        if any(c < 0 for c in cls):
            raise LabelError(f"negative class id in {cls}")
        if any(b <= a for a, b in zip(cls, cls[1:])):
            raise LabelError(f"class ids must be strictly ascending: {cls}")

    @classmethod
    def of(cls, ids: Iterable[int]) -> "LabelSet":
        """Build from any iterable; background is added and ids are sorted."""
        return cls(tuple(sorted(set(int(i) for i in ids) | {BACKGROUND})))

    @property
    def organs(self) -> tuple[int, ...]:
        return self.classes[1:]

    def __contains__(self, c) -> bool:
        return int(c) in self.classes

    def __len__(self) -> int:
        return len(self.classes)

    def __iter__(self):
        return iter(self.classes)

    def issubset(self, other: "LabelSet") -> bool:
        return set(self.classes) <= set(other.classes)


class ScenarioKind(enum.IntEnum):
    DISJOINT = 1
    OVERLAPPING = 2
    SUPERSET = 3


@dataclass(frozen=True)
class ChannelLayout:
    """Maps output channel index to global class id; channel 0 is background."""

    channel_to_class: tuple[int, ...]

    def __post_init__(self):
        ids = tuple(int(c) for c in self.channel_to_class)
        object.__setattr__(self, "channel_to_class", ids)
        if not ids or ids[0] != BACKGROUND:
            raise LabelError(f"layout must map channel 0 to background, got {ids}")
        if len(set(ids)) != len(ids):
            raise LabelError(f"layout is not injective: {ids}")

    @classmethod
    def for_labels(cls, labels: LabelSet) -> "ChannelLayout":
        return cls(labels.classes)

    def __len__(self) -> int:
        return len(self.channel_to_class)

    def index_of(self, class_id: int) -> int:
        try:
            return self.channel_to_class.index(int(class_id))
        except ValueError:
            raise LabelError(f"class {class_id} not in layout {self.channel_to_class}") from None


def full_label_set(la: LabelSet, lb: LabelSet) -> LabelSet:
    return LabelSet(tuple(sorted(set(la.classes) | set(lb.classes))))


def complement(global_set: LabelSet, lm: LabelSet) -> tuple[int, ...]:
    """Classes of ``global_set`` that modality label set ``lm`` leaves unlabeled."""
    if not lm.issubset(global_set):
        raise LabelError(f"{lm.classes} is not a subset of {global_set.classes}")
    labeled = set(lm.classes)
    return tuple(c for c in global_set.classes if c not in labeled)


def classify_scenario(la: LabelSet, lb: LabelSet) -> ScenarioKind:
    oa, ob = set(la.organs), set(lb.organs)
    if oa == ob:
        raise LabelError("identical label sets are not a partially supervised setting")
    if not oa & ob:
        return ScenarioKind.DISJOINT
    if oa < ob or ob < oa:
        return ScenarioKind.SUPERSET
    return ScenarioKind.OVERLAPPING


@dataclass(frozen=True)
class ScenarioSpec:
    """Joint label set, per-modality label sets and their complements."""

    modality_a: LabelSet
    modality_b: LabelSet

    def __post_init__(self):
        # raises on identical sets
        classify_scenario(self.modality_a, self.modality_b)

    @classmethod
    def from_organs(cls, organs_a: Iterable[int], organs_b: Iterable[int]) -> "ScenarioSpec":
        return cls(LabelSet.of(organs_a), LabelSet.of(organs_b))

    @property
    def global_set(self) -> LabelSet:
        return full_label_set(self.modality_a, self.modality_b)

    @property
    def kind(self) -> ScenarioKind:
        return classify_scenario(self.modality_a, self.modality_b)

    @property
    def num_classes(self) -> int:
        return len(self.global_set)

    @property
    def global_layout(self) -> ChannelLayout:
        return ChannelLayout.for_labels(self.global_set)

    def labels(self, modality: str) -> LabelSet:
        if modality == "A":
            return self.modality_a
        if modality == "B":
            return self.modality_b
        raise LabelError(f"unknown modality {modality!r}")

    def complement(self, modality: str) -> tuple[int, ...]:
        return complement(self.global_set, self.labels(modality))

    def organ_count(self, modality: str) -> int:
        return len(self.labels(modality).organs)

    def to_dict(self) -> dict:
        return {
            "modality_a": list(self.modality_a.classes),
            "modality_b": list(self.modality_b.classes),
            "global": list(self.global_set.classes),
            "complement_a": list(self.complement("A")),
            "complement_b": list(self.complement("B")),
            "kind": int(self.kind),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        spec = cls(LabelSet(tuple(d["modality_a"])), LabelSet(tuple(d["modality_b"])))
        if "kind" in d and int(d["kind"]) != int(spec.kind):
            raise LabelError(f"stored scenario kind {d['kind']} disagrees with label sets")
        return spec


def merge_probs(
    probs: torch.Tensor, merge_set: Iterable[int], layout: ChannelLayout
) -> tuple[torch.Tensor, ChannelLayout]:
    """Fold the probability mass of ``merge_set`` into the background channel.

    ``probs`` is laid out by ``layout``. The background channel of the result is
    accumulated in ascending class-id order so results are reproducible bit for bit.
    """
    merge = sorted(set(int(c) for c in merge_set) - {BACKGROUND})
    if probs.shape[-3] != len(layout):
        raise LabelError(f"probs have {probs.shape[-3]} channels, layout has {len(layout)}")
    unknown = [c for c in merge if c not in layout.channel_to_class]
    if unknown:
        raise LabelError(f"merge set contains classes {unknown} outside layout")

    if not merge:
        return probs, layout

    background = probs.select(-3, 0)
    for c in merge:
        background = background + probs.select(-3, layout.index_of(c))

    kept = [(c, i) for i, c in enumerate(layout.channel_to_class) if i > 0 and c not in merge]
    kept.sort()
    channels = [background] + [probs.select(-3, i) for _, i in kept]
    out_layout = ChannelLayout((BACKGROUND,) + tuple(c for c, _ in kept))
    return torch.stack(channels, dim=-3), out_layout


def _as_array(mask):
    return mask.numpy() if isinstance(mask, torch.Tensor) else np.asarray(mask)


def partialize_mask(mask, lm: LabelSet, global_set: LabelSet | None = None):
    """Relabel every class outside ``lm`` as background."""
    arr = _as_array(mask)
    if global_set is not None:
        bad = np.setdiff1d(np.unique(arr), np.asarray(global_set.classes))
        if bad.size:
            raise LabelError(f"mask contains ids {bad.tolist()} outside {global_set.classes}")
    keep = np.isin(arr, np.asarray(lm.classes))
    out = np.where(keep, arr, BACKGROUND).astype(arr.dtype, copy=False)
    return torch.from_numpy(out) if isinstance(mask, torch.Tensor) else out


def local_index(mask, layout: ChannelLayout):
    """Translate global class ids to channel indices of ``layout``."""
    arr = _as_array(mask)
    lut_size = max(int(arr.max(initial=0)), max(layout.channel_to_class)) + 1
    lut = np.full(lut_size, -1, dtype=np.int64)
    for i, c in enumerate(layout.channel_to_class):
        lut[c] = i
    if arr.size and arr.min() < 0:
        raise LabelError("negative class id in mask")
    out = lut[arr]
    if (out < 0).any():
        missing = np.unique(arr[out < 0]).tolist()
        raise LabelError(f"class ids {missing} not in layout {layout.channel_to_class}")
    return torch.from_numpy(out) if isinstance(mask, torch.Tensor) else out


def merged_layout(layout: ChannelLayout, merge_set: Sequence[int]) -> ChannelLayout:
    merge = set(merge_set) - {BACKGROUND}
    return ChannelLayout((BACKGROUND,) + tuple(sorted(c for c in layout.channel_to_class[1:] if c not in merge)))
