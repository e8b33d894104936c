"""Procedural resembling-glyph corpus for desk-scale runs.

Each group shares a random stroke skeleton; each class in a group toggles its
own small pixel cluster, so classes inside a group differ in a handful of
pixels. Samples then get nuisance variation: pose, blur, textured colored
background, ink contrast and sensor noise. ``noise`` scales all nuisances.
"""
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw, ImageFilter

from .data import GlyphDataset, SampleRecord

MAX_DIFF_FRACTION = 0.05
CLUSTER = 4
_MARGIN = 6


def _skeleton(rng, size):
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    lo, hi = _MARGIN, size - _MARGIN
    for _ in range(rng.integers(3, 6)):
        if rng.random() < 0.7:
            x0, y0, x1, y1 = rng.integers(lo, hi, 4).tolist()
            draw.line((x0, y0, x1, y1), fill=255, width=2)
        else:
            x0, y0 = rng.integers(lo, hi - 8, 2).tolist()
            w, h = rng.integers(6, 12, 2).tolist()
            start = int(rng.integers(0, 360))
            draw.arc((x0, y0, x0 + w, y0 + h), start, start + int(rng.integers(90, 270)), fill=255, width=2)
    return np.asarray(img) > 127


def _cluster_sites(rng, size, count):
    sites = []
    lo, hi = _MARGIN - 2, size - _MARGIN - CLUSTER + 2
    while len(sites) < count:
        y, x = rng.integers(lo, hi, 2).tolist()
        if all(abs(y - sy) >= CLUSTER + 1 or abs(x - sx) >= CLUSTER + 1 for sy, sx in sites):
            sites.append((y, x))
    return sites


def glyph_bitmaps(num_groups, glyphs_per_group, seed=0, size=32):
    """Clean per-class bitmaps, ``[group][k]`` -> bool (size, size)."""
    if glyphs_per_group < 2:
        raise ValueError(f"glyphs_per_group must be >= 2, got {glyphs_per_group}")
    if num_groups < 1:
        raise ValueError(f"num_groups must be >= 1, got {num_groups}")
    rng = np.random.default_rng([seed, 0])
    limit = MAX_DIFF_FRACTION * size * size
    groups = []
    for _ in range(num_groups):
        while True:
            base = _skeleton(rng, size)
            glyphs = []
            for y, x in _cluster_sites(rng, size, glyphs_per_group):
                g = base.copy()
                g[y:y + CLUSTER, x:x + CLUSTER] ^= True
                glyphs.append(g)
            diffs = [np.count_nonzero(a != b) for i, a in enumerate(glyphs) for b in glyphs[i + 1:]]
            if base.sum() >= size and all(1 <= d <= limit for d in diffs):
                break
        groups.append(glyphs)
    return groups


def _texture(rng, size, noise):
    coarse = rng.random((4, 4, 3))
    img = Image.fromarray((coarse * 255).astype(np.uint8)).resize((size, size), Image.BICUBIC)
    tex = np.asarray(img, dtype=np.float64) / 255.0
    base = rng.random(3)
    return np.clip(base + (tex - 0.5) * 0.6 * min(noise, 2.0), 0, 1)


def render_sample(bitmap, rng, noise=1.0):
    """One nuisance-perturbed RGB uint8 rendering of a clean bitmap."""
    size = bitmap.shape[0]
    mask = Image.fromarray((bitmap * 255).astype(np.uint8))
    angle = rng.uniform(-8, 8) * noise
    shift = rng.uniform(-1.5, 1.5, 2) * noise
    scale = 1 + rng.uniform(-0.08, 0.08) * noise
    mask = mask.rotate(angle, resample=Image.BILINEAR, translate=tuple(shift.tolist()))
    if abs(scale - 1) > 1e-9:
        side = max(1, int(round(size * scale)))
        scaled = mask.resize((side, side), Image.BILINEAR)
        canvas = Image.new("L", (size, size), 0)
        canvas.paste(scaled, ((size - side) // 2, (size - side) // 2))
        mask = canvas
    blur = rng.uniform(0, 0.7) * noise
    if blur > 0.05:
        mask = mask.filter(ImageFilter.GaussianBlur(blur))
    alpha = np.asarray(mask, dtype=np.float64)[..., None] / 255.0

    bg = _texture(rng, size, noise)
    contrast = rng.uniform(0.45, 0.9) / max(1.0, 0.6 * noise)
    direction = np.where(bg.mean(axis=(0, 1)) > 0.5, -1.0, 1.0)
    ink = np.clip(bg.mean(axis=(0, 1)) + direction * contrast + rng.uniform(-0.1, 0.1, 3), 0, 1)
    img = bg * (1 - alpha) + ink * alpha
    img = img + rng.normal(0, 0.03 * noise, img.shape)
    return (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)


def synth_resembling_glyphs(num_groups, glyphs_per_group, samples_per_class=20, seed=0,
                            noise=1.0, size=32):
    """Dataset of ``num_groups * glyphs_per_group`` classes; deterministic per seed."""
    groups = glyph_bitmaps(num_groups, glyphs_per_group, seed=seed, size=size)
    rng = np.random.default_rng([seed, 1])
    samples, names = [], []
    for g, glyphs in enumerate(groups):
        for k, bitmap in enumerate(glyphs):
            name = f"g{g:03d}k{k:02d}"
            cid = len(names)
            names.append(name)
            for i in range(samples_per_class):
                samples.append(SampleRecord(f"{name}/s{i:03d}.png", cid, name,
                                            payload=render_sample(bitmap, rng, noise)))
    return GlyphDataset(samples, names)


def write_dataset(dataset, out_dir):
    """Write ``<out>/<class_name>/<file>.png`` so :func:`ccfg.data.ingest` reads it back."""
    out = Path(out_dir)
    for s in dataset.samples:
        path = out / s.sample_id
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(s.payload).save(path)
    return out
