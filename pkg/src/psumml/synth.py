"""Two-modality 2-D phantom datasets and their on-disk format.

Layout of a dataset directory::

    manifest.json
    <id>.img   b"PSMLIMG1", uint32 W, uint32 H, W*H float32 (little endian, row major)
    <id>.msk   b"PSMLMSK1", uint32 W, uint32 H, W*H uint8 full mask, W*H uint8 partial mask
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .labels import LabelSet, ScenarioSpec, partialize_mask

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
IMG_MAGIC = b"PSMLIMG1"
MSK_MAGIC = b"PSMLMSK1"
TRAIN_FRACTION = 0.8
MAX_RETRIES = 100


class DatasetError(Exception):
    pass


class DatasetVersionError(DatasetError):
    pass


class ChecksumError(DatasetError):
    pass


class MissingFileError(DatasetError, FileNotFoundError):
    pass


@dataclass
class PhantomConfig:
    image_size: int = 64
    organ_count: int = 4
    shapes_per_class: tuple[int, int] = (1, 2)
    # total area of one class as a fraction of the image
    size_range: tuple[float, float] = (0.08, 0.25)
    seed: int = 0

    def __post_init__(self):
        self.shapes_per_class = tuple(self.shapes_per_class)
        self.size_range = tuple(self.size_range)
        if self.organ_count < 1:
            raise ValueError("organ_count must be >= 1")
        lo, hi = self.size_range
        if not (0 < lo <= hi < 0.5):
            raise ValueError(f"size_range must lie in (0, 0.5), got {self.size_range}")
        if not (1 <= self.shapes_per_class[0] <= self.shapes_per_class[1]):
            raise ValueError(f"bad shapes_per_class {self.shapes_per_class}")
        if self.image_size < 8:
            raise ValueError("image_size must be >= 8")


@dataclass
class ModalityStyle:
    modality_id: str
    # mean intensity per class id, index 0 is background
    intensity_lut: tuple[float, ...]
    noise_sigma: float = 0.05
    bias_field: float = 0.1
    contrast_gamma: float = 1.0

    def __post_init__(self):
        self.intensity_lut = tuple(float(v) for v in self.intensity_lut)


# Same class ordering in both modalities, but B is a nonlinear remap of A, so a
# per-modality affine renormalisation fitted on one label subset misplaces the rest.
DEFAULT_STYLES = {
    "A": ModalityStyle("A", (0.10, 0.80, 0.55, 0.35, 0.65), noise_sigma=0.05, bias_field=0.15, contrast_gamma=1.0),
    "B": ModalityStyle("B", (0.30, 0.98, 0.70, 0.45, 0.85), noise_sigma=0.04, bias_field=0.10, contrast_gamma=0.8),
}


def default_styles() -> dict[str, ModalityStyle]:
    return {k: ModalityStyle(**asdict(v)) for k, v in DEFAULT_STYLES.items()}


def _ellipse(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = xx - cx, yy - cy
    c, s = np.cos(theta), np.sin(theta)
    u = (c * dx + s * dy) / a
    v = (-s * dx + c * dy) / b
    return u * u + v * v <= 1.0


def _class_blobs(cfg: PhantomConfig, c: int, rng: np.random.Generator) -> np.ndarray:
    n = cfg.image_size
    k = cfg.organ_count
    area = rng.uniform(*cfg.size_range) * n * n
    nblobs = int(rng.integers(cfg.shapes_per_class[0], cfg.shapes_per_class[1] + 1))
    # each class sits near its own anchor on a ring, with a class-specific elongation
    angle = 2 * np.pi * (c - 1) / k + rng.normal(0, 0.25)
    radius = 0.22 * n if k > 1 else 0.0
    ax = n / 2 + radius * np.cos(angle)
    ay = n / 2 + radius * np.sin(angle)
    elong = 1.0 + 1.2 * (c - 1) / max(1, k - 1)
    out = np.zeros((n, n), dtype=bool)
    for _ in range(nblobs):
        # slight shrink so the rasterised area never exceeds the target
        blob_area = 0.97 * area / nblobs
        ratio = elong * rng.uniform(0.9, 1.1)
        b = np.sqrt(blob_area / (np.pi * ratio))
        a = b * ratio
        theta = rng.uniform(0, np.pi)
        reach = max(a, b)
        cx = np.clip(ax + rng.normal(0, 0.05 * n), reach, n - reach)
        cy = np.clip(ay + rng.normal(0, 0.05 * n), reach, n - reach)
        out |= _ellipse(n, cx, cy, a, b, theta)
    return out


def generate_phantom(cfg: PhantomConfig, rng: np.random.Generator) -> np.ndarray:
    """Full class-id mask; later classes are drawn on top of earlier ones."""
    n = cfg.image_size
    for attempt in range(MAX_RETRIES):
        mask = np.zeros((n, n), dtype=np.uint8)
        for c in range(1, cfg.organ_count + 1):
            mask[_class_blobs(cfg, c, rng)] = c
        present = set(np.unique(mask).tolist())
        if all(c in present for c in range(1, cfg.organ_count + 1)):
            return mask
    missing = sorted(set(range(1, cfg.organ_count + 1)) - present)
    warnings.warn(f"phantom missing classes {missing} after {MAX_RETRIES} placements", RuntimeWarning)
    return mask


def _bias_field(n: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:n, 0:n] / n
    gx, gy = rng.normal(size=2)
    phase = rng.uniform(0, 2 * np.pi)
    f = gx * (xx - 0.5) + gy * (yy - 0.5) + 0.5 * np.sin(2 * np.pi * (xx + yy) / 2 + phase)
    return f / (np.abs(f).max() + 1e-12)


def render_modality(full_mask: np.ndarray, style: ModalityStyle, rng: np.random.Generator) -> np.ndarray:
    lut = np.asarray(style.intensity_lut, dtype=np.float64)
    if full_mask.max() >= lut.size:
        raise ValueError(f"mask class {full_mask.max()} has no intensity in style {style.modality_id}")
    base = lut[full_mask]
    n = full_mask.shape[0]
    bias = 1.0 + style.bias_field * _bias_field(n, rng) if style.bias_field else 1.0
    noise = rng.normal(0.0, style.noise_sigma, size=full_mask.shape) if style.noise_sigma else 0.0
    img = np.clip(base * bias + noise, 0.0, 1.0)
    if style.contrast_gamma != 1.0:
        img = img ** style.contrast_gamma
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    return np.random.default_rng([int(seed), zlib.crc32(sample_id.encode())])


@dataclass
class SampleRecord:
    image: np.ndarray
    full_mask: np.ndarray
    partial_mask: np.ndarray
    modality: str
    sample_id: str


def make_sample(scenario: ScenarioSpec, cfg: PhantomConfig, style: ModalityStyle, modality: str, sample_id: str):
    rng = sample_rng(cfg.seed, sample_id)
    full = generate_phantom(cfg, rng)
    image = render_modality(full, style, rng)
    partial = partialize_mask(full, scenario.labels(modality))
    return SampleRecord(image, full, partial, modality, sample_id)


# --- file format ---------------------------------------------------------

def encode_image(img: np.ndarray) -> bytes:
    h, w = img.shape
    return IMG_MAGIC + struct.pack("<II", w, h) + np.ascontiguousarray(img, dtype="<f4").tobytes()


def decode_image(data: bytes, name: str = "<bytes>") -> np.ndarray:
    if data[:8] != IMG_MAGIC:
        raise DatasetError(f"{name}: bad image magic")
    w, h = struct.unpack("<II", data[8:16])
    body = data[16:]
    if len(body) != 4 * w * h:
        raise DatasetError(f"{name}: expected {w * h} floats, found {len(body) // 4}")
    return np.frombuffer(body, dtype="<f4").reshape(h, w).astype(np.float32)


def encode_masks(full: np.ndarray, partial: np.ndarray) -> bytes:
    h, w = full.shape
    return (
        MSK_MAGIC
        + struct.pack("<II", w, h)
        + np.ascontiguousarray(full, dtype=np.uint8).tobytes()
        + np.ascontiguousarray(partial, dtype=np.uint8).tobytes()
    )


def decode_masks(data: bytes, name: str = "<bytes>") -> tuple[np.ndarray, np.ndarray]:
    if data[:8] != MSK_MAGIC:
        raise DatasetError(f"{name}: bad mask magic")
    w, h = struct.unpack("<II", data[8:16])
    body = data[16:]
    if len(body) != 2 * w * h:
        raise DatasetError(f"{name}: expected {2 * w * h} mask bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr[: w * h].reshape(h, w).copy(), arr[w * h:].reshape(h, w).copy()


def _write(path: Path, data: bytes) -> int:
    try:
        path.write_bytes(data)
    except OSError as e:
        raise OSError(f"failed writing {path}: {e}") from e
    return zlib.crc32(data)


@dataclass
class Dataset:
    scenario: ScenarioSpec
    splits: dict[str, dict[str, list[SampleRecord]]]
    config: dict = field(default_factory=dict)
    path: Path | None = None

    def records(self, modality: str, split: str) -> list[SampleRecord]:
        return self.splits[modality][split]

    def arrays(self, modality: str, split: str):
        """Stacked (images, full masks, partial masks) for one modality/split."""
        recs = self.records(modality, split)
        imgs = np.stack([r.image for r in recs])[:, None]
        full = np.stack([r.full_mask for r in recs]).astype(np.int64)
        part = np.stack([r.partial_mask for r in recs]).astype(np.int64)
        return imgs, full, part


def split_ids(ids: list[str], seed: int, modality: str) -> tuple[list[str], list[str]]:
    n_train = int(round(TRAIN_FRACTION * len(ids)))
    order = np.random.default_rng([int(seed), zlib.crc32(f"split-{modality}".encode())]).permutation(len(ids))
    train = sorted(ids[i] for i in order[:n_train])
    test = sorted(ids[i] for i in order[n_train:])
    return train, test


def build_dataset(
    scenario: ScenarioSpec,
    cfg: PhantomConfig,
    styles: dict[str, ModalityStyle],
    n_per_modality: int,
    out_dir,
) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lut_len = cfg.organ_count + 1
    for m, style in styles.items():
        if len(style.intensity_lut) < lut_len:
            raise ValueError(f"style {m} has {len(style.intensity_lut)} intensities, need {lut_len}")
    if max(scenario.global_set.classes) > cfg.organ_count:
        raise ValueError("scenario references classes beyond organ_count")

    checksums: dict[str, int] = {}
    splits: dict[str, dict[str, list[str]]] = {}
    for m in ("A", "B"):
        ids = [f"{m}_{i:04d}" for i in range(n_per_modality)]
        for sid in ids:
            rec = make_sample(scenario, cfg, styles[m], m, sid)
            checksums[f"{sid}.img"] = _write(out / f"{sid}.img", encode_image(rec.image))
            checksums[f"{sid}.msk"] = _write(out / f"{sid}.msk", encode_masks(rec.full_mask, rec.partial_mask))
        train, test = split_ids(ids, cfg.seed, m)
        splits[m] = {"train": train, "test": test}

    manifest = {
        "version": MANIFEST_VERSION,
        "scenario": scenario.to_dict(),
        "splits": splits,
        "counts": {m: n_per_modality for m in ("A", "B")},
        "config": {
            "phantom": asdict(cfg),
            "styles": {m: asdict(s) for m, s in styles.items()},
            "n_per_modality": n_per_modality,
        },
        "checksums": checksums,
    }
    text = json.dumps(manifest, indent=2, sort_keys=True) + "\n"
    try:
        (out / "manifest.json").write_text(text, encoding="utf-8")
    except OSError as e:
        raise OSError(f"failed writing {out / 'manifest.json'}: {e}") from e
    log.info("wrote %d samples to %s", 2 * n_per_modality, out)
    return manifest


def _read_checked(path: Path, expected: int) -> bytes:
    if not path.exists():
        raise MissingFileError(f"missing dataset file {path}")
    data = path.read_bytes()
    if zlib.crc32(data) != expected:
        raise ChecksumError(f"checksum mismatch for {path}")
    return data


def load_dataset(path) -> Dataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise MissingFileError(f"missing manifest {mpath}")
    manifest = json.loads(mpath.read_text(encoding="utf-8"))
    if manifest.get("version") != MANIFEST_VERSION:
        raise DatasetVersionError(f"{mpath}: unsupported manifest version {manifest.get('version')}")
    scenario = ScenarioSpec.from_dict(manifest["scenario"])
    sums = manifest["checksums"]
    splits: dict[str, dict[str, list[SampleRecord]]] = {}
    for m, parts in manifest["splits"].items():
        labels: LabelSet = scenario.labels(m)
        splits[m] = {}
        for split, ids in parts.items():
            recs = []
            for sid in ids:
                img = decode_image(_read_checked(root / f"{sid}.img", sums[f"{sid}.img"]), f"{sid}.img")
                full, partial = decode_masks(_read_checked(root / f"{sid}.msk", sums[f"{sid}.msk"]), f"{sid}.msk")
                if not np.array_equal(partialize_mask(full, labels), partial):
                    raise DatasetError(f"{sid}.msk: partial mask does not match modality {m} label set")
                recs.append(SampleRecord(img, full, partial, m, sid))
            splits[m][split] = recs
    return Dataset(scenario, splits, manifest.get("config", {}), root)


def load_styles(d: dict) -> dict[str, ModalityStyle]:
    return {m: ModalityStyle(**s) for m, s in d.items()}
