"""BUSI-layout ingestion, preprocessing, stratified splits, and synthetic data.

Directory layout (both read and written)::

    root/
      benign/     <stem>.png, <stem>_mask.png, <stem>_mask_1.png, ...
      malignant/  ...
      normal/     ...
"""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ContractError, IngestionError, SplitError

log = logging.getLogger(__name__)

CLASSES = ("benign", "malignant", "normal")
LABELS = {name: i for i, name in enumerate(CLASSES)}
_MASK_RE = re.compile(r"^(?P<stem>.+)_mask(?:_\d+)?$")


@dataclass
class RawRecord:
    image: np.ndarray  # uint8 [H, W]
    mask: np.ndarray  # bool [H, W]
    label: int
    source: str


@dataclass
class Sample:
    image: np.ndarray  # float32 [1, H, W] in [0, 1]
    mask: np.ndarray  # float32 [1, H, W] in {0, 1}
    label: int
    source: str


@dataclass
class SplitSpec:
    train: float = 0.70
    val: float = 0.15
    test: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if abs(self.train + self.val + self.test - 1.0) > 1e-9:
            raise SplitError(f"split fractions must sum to 1, got {self.train + self.val + self.test}")


@dataclass
class SynthConfig:
    n_samples: int = 100
    image_size: int = 64
    class_mix: tuple = (0.4, 0.3, 0.3)  # benign, malignant, normal
    noise: float = 0.08
    seed: int = 0
    min_radius: float = 0.10  # fractions of image_size
    max_radius: float = 0.22


def _read_gray(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc


def load_busi(root) -> list[RawRecord]:
    """Read every base image under ``root``; masks are merged by pixelwise union."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} does not exist")
    missing = [str(root / c) for c in CLASSES if not (root / c).is_dir()]
    if missing:
        raise IngestionError(f"dataset root is missing class directories: {', '.join(missing)}")

    records = []
    empty = []
    for cls in CLASSES:
        images: dict[str, Path] = {}
        masks: dict[str, list[Path]] = {}
        for path in sorted((root / cls).glob("*.png")):
            m = _MASK_RE.match(path.stem)
            if m:
                masks.setdefault(m.group("stem"), []).append(path)
            else:
                images[path.stem] = path
        if not images:
            empty.append(str(root / cls))
            continue
        for stem in sorted(images):
            img = _read_gray(images[stem])
            mask = np.zeros(img.shape, dtype=bool)
            for mp in masks.get(stem, []):
                mk = _read_gray(mp)
                if mk.shape != img.shape:
                    raise IngestionError(f"mask {mp} has shape {mk.shape}, image has {img.shape}")
                mask |= mk >= 128
            records.append(RawRecord(img, mask, LABELS[cls], str(images[stem].relative_to(root))))
        orphans = sorted(set(masks) - set(images))
        for stem in orphans:
            log.warning("mask without image ignored: %s/%s", cls, stem)
    if empty:
        raise IngestionError(f"no images found in: {', '.join(empty)}")
    return records


def preprocess(record: RawRecord, size: int = 128) -> Sample:
    """Resize (bilinear image, nearest mask), scale to [0, 1], add a channel axis."""
    img = record.image
    if img.size == 0:
        raise ContractError(f"{record.source}: zero-sized image")
    if img.ndim == 3:
        img = np.asarray(Image.fromarray(img).convert("L"))
    im = Image.fromarray(img.astype(np.uint8), mode="L").resize((size, size), Image.BILINEAR)
    mk = Image.fromarray(record.mask.astype(np.uint8) * 255, mode="L").resize((size, size), Image.NEAREST)
    image = (np.asarray(im, dtype=np.float32) / 255.0)[None]
    mask = ((np.asarray(mk, dtype=np.float32) / 255.0) >= 0.5).astype(np.float32)[None]
    return Sample(image, mask, record.label, record.source)


def load_dataset(root, size: int = 128) -> list[Sample]:
    return [preprocess(r, size) for r in load_busi(root)]


def stratified_split(samples: Sequence[Sample], spec: Optional[SplitSpec] = None):
    """Per class: shuffle, floor(test*n) to test, floor(val*n) to val, rest to train."""
    spec = spec or SplitSpec()
    by_label: dict[int, list[int]] = {}
    for i, s in enumerate(samples):
        by_label.setdefault(s.label, []).append(i)
    rng = np.random.default_rng(spec.seed)
    train, val, test = [], [], []
    for label in sorted(by_label):
        idx = by_label[label]
        if len(idx) < 3:
            name = CLASSES[label] if 0 <= label < len(CLASSES) else str(label)
            raise SplitError(f"class '{name}' has {len(idx)} samples; at least 3 are needed")
        order = [idx[j] for j in rng.permutation(len(idx))]
        n_test = int(np.floor(spec.test * len(idx) + 1e-9))
        n_val = int(np.floor(spec.val * len(idx) + 1e-9))
        test.extend(order[:n_test])
        val.extend(order[n_test:n_test + n_val])
        train.extend(order[n_test + n_val:])
    pick = lambda ids: [samples[i] for i in sorted(ids)]
    return pick(train), pick(val), pick(test)


def rasterize_ellipse(size: int, cy: float, cx: float, ry: float, rx: float, angle: float = 0.0) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the ellipse."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy + 0.5 - cy, xx + 0.5 - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    return u * u + v * v <= 1.0


def generate_synthetic(config: SynthConfig) -> list[Sample]:
    """Bright elliptical blobs on a noisy dark background.

    benign: one blob, malignant: two blobs, normal: none (all-zero mask).
    Images are built as uint8 so writing them to PNG and reading back is lossless.
    """
    rng = np.random.default_rng(config.seed)
    n = config.image_size
    mix = np.asarray(config.class_mix, dtype=np.float64)
    labels = rng.choice(3, size=config.n_samples, p=mix / mix.sum())
    out = []
    for i, label in enumerate(labels):
        bg = 0.18 + 0.06 * rng.random()
        img = np.full((n, n), bg)
        # smooth low-frequency shading plus pixel noise
        yy, xx = np.mgrid[0:n, 0:n] / n
        img += 0.05 * np.sin(2 * np.pi * (rng.random() + yy * rng.uniform(0.5, 1.5))) * np.cos(
            2 * np.pi * xx * rng.uniform(0.5, 1.5)
        )
        mask = np.zeros((n, n), dtype=bool)
        n_blobs = {0: 1, 1: 2, 2: 0}[int(label)]
        for _ in range(n_blobs):
            ry = rng.uniform(config.min_radius, config.max_radius) * n
            rx = rng.uniform(config.min_radius, config.max_radius) * n
            margin = max(rx, ry)
            cy = rng.uniform(margin, n - margin)
            cx = rng.uniform(margin, n - margin)
            blob = rasterize_ellipse(n, cy, cx, ry, rx, rng.uniform(0, np.pi))
            img[blob] = rng.uniform(0.65, 0.9)
            mask |= blob
        img += rng.normal(0.0, config.noise, size=(n, n))
        u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        out.append(
            Sample(
                image=(u8.astype(np.float32) / 255.0)[None],
                mask=mask.astype(np.float32)[None],
                label=int(label),
                source=f"{CLASSES[label]}/synth_{i:05d}.png",
            )
        )
    return out


def write_busi(samples: Sequence[Sample], root) -> None:
    """Write samples in BUSI layout; normal-class masks are omitted (loader fills blanks)."""
    root = Path(root)
    for cls in CLASSES:
        (root / cls).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        cls = CLASSES[s.label]
        stem = f"{cls}_{i:05d}"
        img = np.clip(np.round(s.image[0] * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img, mode="L").save(root / cls / f"{stem}.png")
        if s.mask.any() or s.label != LABELS["normal"]:
            Image.fromarray((s.mask[0] > 0.5).astype(np.uint8) * 255, mode="L").save(root / cls / f"{stem}_mask.png")


def batch_iter(split: Sequence[Sample], batch_size: int, seed: int = 0, epoch: int = 0,
               shuffle: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, masks) batches; the order is a function of (seed, epoch) only."""
    if batch_size < 1:
        raise ContractError(f"batch_size must be >= 1, got {batch_size}")
    if not split:
        raise ContractError("cannot iterate over an empty split")
    n = len(split)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        ids = order[start:start + batch_size]
        yield (np.stack([split[i].image for i in ids]), np.stack([split[i].mask for i in ids]))
