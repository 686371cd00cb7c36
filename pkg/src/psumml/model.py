"""Compact U-shaped segmentation network with per-modality batch norm, and the
class-conditional domain discriminators."""

from __future__ import annotations

import contextlib
import copy
import io
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .labels import ChannelLayout, ScenarioSpec, merged_layout

MODALITIES = ("A", "B")
CHECKPOINT_VERSION = 1


class ModalityBatchNorm(nn.Module):
    """One BatchNorm2d bank per modality; everything around it is shared."""

    def __init__(self, num_features: int, modalities=MODALITIES):
        super().__init__()
        self.banks = nn.ModuleDict({m: nn.BatchNorm2d(num_features) for m in modalities})
        self.update_stats = True

    def forward(self, x, modality: str):
        bn = self.banks[modality]
        if self.training and not self.update_stats:
            # batch statistics, running buffers untouched
            return F.batch_norm(x, None, None, bn.weight, bn.bias, True, 0.0, bn.eps)
        return bn(x)


class ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1, bias=False)
        self.norm1 = ModalityBatchNorm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = ModalityBatchNorm(cout)

    def forward(self, x, modality):
        x = F.relu(self.norm1(self.conv1(x), modality))
        return F.relu(self.norm2(self.conv2(x), modality))


class SegNet(nn.Module):
    """S = C o F. ``encoder`` is everything up to the last decoder feature map."""

    def __init__(self, num_classes: int, in_channels: int = 1, width: int = 16):
        super().__init__()
        w = width
        self.num_classes = num_classes
        self.feature_channels = w
        self.enc1 = ConvBlock(in_channels, w)
        self.enc2 = ConvBlock(w, 2 * w)
        self.mid = ConvBlock(2 * w, 4 * w)
        self.up2 = nn.ConvTranspose2d(4 * w, 2 * w, 2, stride=2)
        self.dec2 = ConvBlock(4 * w, 2 * w)
        self.up1 = nn.ConvTranspose2d(2 * w, w, 2, stride=2)
        self.dec1 = ConvBlock(2 * w, w)
        self.classifier = nn.Conv2d(w, num_classes, 1)

    def encode(self, x, modality: str):
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        if x.dim() != 4 or x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"expected (N, C, H, W) with H, W divisible by 4, got {tuple(x.shape)}")
        e1 = self.enc1(x, modality)
        e2 = self.enc2(F.max_pool2d(e1, 2), modality)
        m = self.mid(F.max_pool2d(e2, 2), modality)
        d2 = self.dec2(torch.cat([self.up2(m), e2], 1), modality)
        return self.dec1(torch.cat([self.up1(d2), e1], 1), modality)

    def forward(self, x, modality: str):
        """Return (features, logits)."""
        feats = self.encode(x, modality)
        return feats, self.classifier(feats)

    def norm_layers(self):
        return [m for m in self.modules() if isinstance(m, ModalityBatchNorm)]

    @contextlib.contextmanager
    def frozen_stats(self):
        """Train-mode forward passes inside this block leave running stats alone."""
        layers = self.norm_layers()
        for layer in layers:
            layer.update_stats = False
        try:
            yield self
        finally:
            for layer in layers:
                layer.update_stats = True

    def bank_parameter_names(self, modality: str) -> set[str]:
        return {n for n, _ in self.named_parameters() if f".banks.{modality}." in n}

    def shared_parameter_names(self) -> set[str]:
        return {n for n, _ in self.named_parameters() if ".banks." not in n}


def seg_forward(model: SegNet, image, modality: str):
    """(features, softmax probabilities over the global layout)."""
    feats, logits = model(image, modality)
    return feats, torch.softmax(logits, dim=1)


class Discriminator(nn.Module):
    """Per-pixel class-aware domain classifier guarding one modality's complement.

    Strided convolutions keep it cheap; the logits are bilinearly upsampled back
    to the image resolution.
    """

    def __init__(self, in_channels: int, out_channels: int, width: int = 32, guard: str = "A"):
        super().__init__()
        self.guard = guard
        self.out_channels = out_channels
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, width, 3, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, stride=1, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(width, width, 3, stride=1, padding=1),
            nn.LeakyReLU(0.2),
        )
        self.head = nn.Conv2d(width, out_channels, 1)

    def forward(self, feats):
        logits = self.head(self.body(feats))
        return F.interpolate(logits, size=feats.shape[-2:], mode="bilinear", align_corners=False)


def disc_forward(d: Discriminator, feats):
    if feats.dim() != 4 or feats.shape[1] != d.body[0].in_channels:
        raise ValueError(f"discriminator expects {d.body[0].in_channels} feature channels, got {tuple(feats.shape)}")
    return torch.softmax(d(feats), dim=1)


def discriminator_channels(scenario: ScenarioSpec, guard: str) -> int:
    """2 (M - M^g): domain-stacked copies of background plus the guard's complement."""
    return 2 * (scenario.num_classes - scenario.organ_count(guard))


def build_discriminators(scenario: ScenarioSpec, feature_channels: int, width: int = 32) -> dict[str, Discriminator]:
    """One discriminator per modality whose complement is non-empty."""
    return {
        m: Discriminator(feature_channels, discriminator_channels(scenario, m), width=width, guard=m)
        for m in MODALITIES
        if scenario.complement(m)
    }


@dataclass
class Snapshot:
    step: int
    state: dict


def snapshot(model: nn.Module, step: int = 0) -> Snapshot:
    return Snapshot(step, {k: v.detach().clone() for k, v in model.state_dict().items()})


def restore(model: nn.Module, snap: Snapshot) -> nn.Module:
    model.load_state_dict(snap.state)
    return model


def model_from_snapshot(template: nn.Module, snap: Snapshot) -> nn.Module:
    m = copy.deepcopy(template)
    restore(m, snap)
    return m.eval()


def layouts_for(scenario: ScenarioSpec) -> dict[str, list[int]]:
    g = scenario.global_layout
    out = {"global": list(g.channel_to_class)}
    for m in MODALITIES:
        out[f"pcl_{m}"] = list(merged_layout(g, scenario.complement(m)).channel_to_class)
        out[f"dpca_{m}"] = list(merged_layout(g, scenario.labels(m).organs).channel_to_class)
    return out


def save_checkpoint(path, scenario: ScenarioSpec, model: SegNet, discs: dict, extra: dict | None = None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "scenario": scenario.to_dict(),
        "layouts": layouts_for(scenario),
        "model": {
            "num_classes": model.num_classes,
            "width": model.feature_channels,
            "disc_width": next((d.head.in_channels for d in discs.values()), 32),
        },
        "seg_state": model.state_dict(),
        "disc_state": {m: d.state_dict() for m, d in discs.items()},
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {payload.get('format_version')}")
    scenario = ScenarioSpec.from_dict(payload["scenario"])
    if payload["layouts"] != layouts_for(scenario):
        raise ValueError(f"{path}: stored channel layouts disagree with scenario")
    model = SegNet(payload["model"]["num_classes"], width=payload["model"]["width"])
    model.load_state_dict(payload["seg_state"])
    discs = build_discriminators(scenario, model.feature_channels, payload["model"].get("disc_width", 32))
    for m, d in discs.items():
        d.load_state_dict(payload["disc_state"][m])
    payload.update(scenario_spec=scenario, seg=model.eval(), discs=discs)
    return payload


def state_bytes(module: nn.Module) -> bytes:
    """Raw bytes of every parameter, for bit-exact comparisons."""
    buf = io.BytesIO()
    for _, p in sorted(module.named_parameters()):
        buf.write(p.detach().cpu().numpy().tobytes())
    return buf.getvalue()


def global_layout(scenario: ScenarioSpec) -> ChannelLayout:
    return scenario.global_layout
