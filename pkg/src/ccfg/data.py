"""Glyph corpora: ingestion, low-shot preparation, splitting and augmentation."""
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
import logging
from pathlib import Path
import zlib

import numpy as np
from PIL import Image, ImageOps
import torch
import torchvision.transforms.functional as TF

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}
SPLITS = ("train", "val", "test", "unassigned")
MANIFEST_NAME = "split_manifest.tsv"


class DataError(ValueError):
    """Corpus or split problem (missing data, wrong class sizes, bad manifest)."""


@dataclass
class SampleRecord:
    sample_id: str
    class_id: int
    class_name: str
    path: str | None = None
    payload: np.ndarray | None = field(default=None, repr=False)  # uint8 (H, W, 3)
    split: str = "unassigned"


@dataclass
class GlyphDataset:
    samples: list
    class_names: list
    skipped: list = field(default_factory=list)

    def __post_init__(self):
        ids = [s.sample_id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sample ids")

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, split):
        if split not in SPLITS:
            raise ValueError(f"unknown split {split!r}")
        return [s for s in self.samples if s.split == split]

    def labels(self, split):
        return [s.class_id for s in self.subset(split)]

    def split_counts(self):
        """``{class_id: {split: count}}``."""
        counts = defaultdict(Counter)
        for s in self.samples:
            counts[s.class_id][s.split] += 1
        return {c: dict(counts[c]) for c in sorted(counts)}


# ---------------------------------------------------------------- ingestion


def ingest(root):
    """One record per readable image under ``<root>/<class_name>/``.

    Class ids follow lexicographic directory order. Unreadable files are
    skipped, logged and listed in ``dataset.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root} is not a directory")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    samples, names, skipped = [], [], []
    for d in class_dirs:
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        good = []
        for f in files:
            try:
                with Image.open(f) as im:
                    im.load()
            except Exception as exc:  # PIL raises several unrelated types on corrupt input
                log.warning("skipping unreadable image %s: %s", f, exc)
                skipped.append(str(f))
                continue
            good.append(f)
        if not good:
            continue
        cid = len(names)
        names.append(d.name)
        samples += [SampleRecord(f"{d.name}/{f.name}", cid, d.name, path=str(f)) for f in good]
    if not samples:
        raise DataError(f"no readable images under {root}")
    return GlyphDataset(samples, names, skipped)


def prepare_low_shot(dataset, min_samples=20, cap=20, seed=0):
    """Drop classes below ``min_samples``, subsample the rest to ``cap``, re-densify ids."""
    rng = np.random.default_rng(seed)
    by_class = defaultdict(list)
    for s in dataset.samples:
        by_class[s.class_id].append(s)
    kept, names = [], []
    for cid in sorted(by_class):
        members = by_class[cid]
        if len(members) < min_samples:
            continue
        if len(members) > cap:
            keep = np.sort(rng.choice(len(members), size=cap, replace=False))
            members = [members[i] for i in keep]
        new_id = len(names)
        names.append(dataset.class_names[cid])
        kept += [replace(s, class_id=new_id, split="unassigned") for s in members]
    if not names:
        raise DataError(f"no class has at least {min_samples} samples")
    return GlyphDataset(kept, names, list(dataset.skipped))


def split_848(dataset, seed=0, counts=(8, 4, 8)):
    """Per-class seeded permutation into train/val/test of the given sizes."""
    per_class = sum(counts)
    rng = np.random.default_rng(seed)
    by_class = defaultdict(list)
    for i, s in enumerate(dataset.samples):
        by_class[s.class_id].append(i)
    assignment = {}
    for cid in sorted(by_class):
        idx = by_class[cid]
        if len(idx) != per_class:
            raise DataError(f"class {dataset.class_names[cid]!r} has {len(idx)} samples, expected {per_class}")
        order = rng.permutation(per_class)
        bounds = np.cumsum((0,) + tuple(counts))
        for split, lo, hi in zip(("train", "val", "test"), bounds[:-1], bounds[1:]):
            for k in order[lo:hi]:
                assignment[idx[k]] = split
    samples = [replace(s, split=assignment[i]) for i, s in enumerate(dataset.samples)]
    return GlyphDataset(samples, list(dataset.class_names), list(dataset.skipped))


def write_manifest(dataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            fh.write(f"{s.sample_id}\t{s.class_id}\t{s.split}\n")


def apply_manifest(dataset, path):
    """Restrict ``dataset`` to the manifest's samples with its class ids and splits."""
    rows = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in SPLITS:
                raise DataError(f"{path}:{n}: malformed manifest line")
            rows[parts[0]] = (int(parts[1]), parts[2])
    by_id = {s.sample_id: s for s in dataset.samples}
    missing = sorted(set(rows) - set(by_id))
    if missing:
        raise DataError(f"{len(missing)} manifest samples not found in corpus, e.g. {missing[0]}")
    names = {}
    samples = []
    for sid, (cid, split) in rows.items():
        s = by_id[sid]
        if names.setdefault(cid, s.class_name) != s.class_name:
            raise DataError(f"class id {cid} maps to two class names")
        samples.append(replace(s, class_id=cid, split=split))
    if sorted(names) != list(range(len(names))):
        raise DataError("manifest class ids are not dense")
    return GlyphDataset(samples, [names[c] for c in range(len(names))], list(dataset.skipped))


# ---------------------------------------------------------------- images


def letterbox(img, size):
    """Aspect-preserving resize with padding to ``size`` = (height, width)."""
    h, w = size
    if img.size == (w, h):
        return img
    return ImageOps.pad(img, (w, h), method=Image.BILINEAR, color=(0, 0, 0))


def load_image(sample, size):
    """uint8 array (H, W, 3) at the encoder's input size."""
    if sample.payload is not None:
        img = Image.fromarray(sample.payload).convert("RGB")
    else:
        with Image.open(sample.path) as im:
            img = im.convert("RGB")
    return np.asarray(letterbox(img, size), dtype=np.uint8)


def image_tensor(samples, size):
    """Stack samples into a uint8 tensor (N, 3, H, W)."""
    arr = np.stack([load_image(s, size) for s in samples])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


@dataclass(frozen=True)
class AugmentationConfig:
    enabled: bool = True
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_probability: float = 0.2
    rotation_degrees: float = 15.0

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if not 0 <= self.hue <= 0.5:
            raise ValueError("hue must lie in [0, 0.5]")
        if not 0 <= self.grayscale_probability <= 1:
            raise ValueError("grayscale_probability must lie in [0, 1]")
        if self.rotation_degrees < 0:
            raise ValueError("rotation_degrees must be nonnegative")


def augment(image, config, rng):
    """Color jitter, random grayscale and random rotation of a float (3, H, W) image."""
    if not (torch.is_tensor(image) and image.dim() == 3 and image.shape[0] == 3
            and image.is_floating_point()):
        raise ValueError("augment expects a float tensor of shape (3, H, W)")
    if not config.enabled:
        return image
    out = image
    for strength, fn in ((config.brightness, TF.adjust_brightness),
                         (config.contrast, TF.adjust_contrast),
                         (config.saturation, TF.adjust_saturation)):
        if strength > 0:
            out = fn(out, float(rng.uniform(max(0.0, 1 - strength), 1 + strength)))
    if config.hue > 0:
        out = TF.adjust_hue(out, float(rng.uniform(-config.hue, config.hue)))
    if config.grayscale_probability > 0 and rng.random() < config.grayscale_probability:
        out = TF.rgb_to_grayscale(out, num_output_channels=3)
    if config.rotation_degrees > 0:
        angle = float(rng.uniform(-config.rotation_degrees, config.rotation_degrees))
        fill = out.mean(dim=(1, 2)).tolist()
        out = TF.rotate(out, angle, interpolation=TF.InterpolationMode.BILINEAR, fill=fill)
    return out.clamp(0.0, 1.0)


def sample_rng(seed, sample_id, *extra):
    """Independent random stream per (seed, sample, extra) so workers agree."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), *extra])


def batch_images(store, indices, ids, config=None, seed=0, epoch=0, offset=0):
    """Float batch from a uint8 store, augmenting each draw with its own stream."""
    x = store[indices].float().div_(255)
    if config is None or not config.enabled:
        return x
    return torch.stack([augment(img, config, sample_rng(seed, ids[i], epoch, offset + k))
                        for k, (i, img) in enumerate(zip(indices.tolist(), x))])
