"""Synthetic mixed-supervision data, augmentation and the on-disk dataset format."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError, FormatError
from .objectives import Box
from .tensor import load_tensor, save_tensor

STRONG, WEAK = "strong", "weak"
MANIFEST_VERSION = 1
_EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass
class Sample:
    image: np.ndarray                   # [1, H, W] float32
    mask: np.ndarray                    # [H, W] integer labels 0..C
    boxes: List[Box] = field(default_factory=list)
    kind: str = STRONG
    id: str = ""

    @property
    def size(self):
        return self.image.shape[-2:]


def mask_to_bbox(component):
    """Tight (x_min, y_min, x_max, y_max) bounds of a boolean component; max side exclusive."""
    component = np.asarray(component, dtype=bool)
    rows = np.flatnonzero(component.any(axis=1))
    cols = np.flatnonzero(component.any(axis=0))
    if rows.size == 0:
        raise DataError("cannot box an empty mask component")
    return Box(int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1)


def boxes_from_mask(mask):
    """One box per 8-connected component of every foreground class, row-major order."""
    mask = np.asarray(mask)
    found = []
    for cls in np.unique(mask):
        if cls == 0:
            continue
        labels, count = ndimage.label(mask == cls, structure=_EIGHT_CONNECTED)
        for k in range(1, count + 1):
            b = mask_to_bbox(labels == k)
            found.append(Box(b.x_min, b.y_min, b.x_max, b.y_max, int(cls)))
    return sorted(found, key=lambda b: (b.y_min, b.x_min, b.class_id))


# -- generation -----------------------------------------------------------------

def _ellipse(size, cy, cx, ay, ax, theta):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = (dx * c + dy * s) / ax
    v = (-dx * s + dy * c) / ay
    return u * u + v * v <= 1.0


def synth_sample(rng, size=64, classes=1, max_blobs=2, noise=0.05, distractors=0, index=0):
    """One image with 1..max_blobs elliptical targets on a smooth noisy background.

    ``distractors`` (max count) adds unlabelled bright squares that a
    segmenter must learn to ignore.
    """
    background = ndimage.gaussian_filter(rng.normal(0, 1, (size, size)), sigma=size / 10)
    background = 0.3 + 0.08 * background / (background.std() + 1e-12)
    image = background.copy()
    mask = np.zeros((size, size), dtype=np.int64)
    occupied = np.zeros((size, size), dtype=bool)
    n_blobs = int(rng.integers(1, max_blobs + 1))
    placed = 0
    for _ in range(50 * n_blobs):
        if placed == n_blobs:
            break
        ay, ax = rng.uniform(0.06, 0.16, size=2) * size
        margin = max(ay, ax) + 2
        cy, cx = rng.uniform(margin, size - margin, size=2)
        blob = _ellipse(size, cy, cx, ay, ax, rng.uniform(0, np.pi))
        grown = ndimage.binary_dilation(blob, structure=_EIGHT_CONNECTED, iterations=2)
        if (grown & occupied).any() or not blob.any():
            continue
        occupied |= grown
        cls = int(rng.integers(1, classes + 1))
        mask[blob] = cls
        image[blob] += rng.uniform(0.15, 0.3) + 0.05 * (cls - 1)
        placed += 1
    n_distract = int(rng.integers(0, distractors + 1)) if distractors else 0
    for _ in range(50 * n_distract):
        if n_distract == 0:
            break
        half = rng.uniform(0.05, 0.12) * size
        cy, cx = rng.uniform(half + 1, size - half - 1, size=2)
        yy, xx = np.mgrid[0:size, 0:size]
        square = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        if (square & occupied).any():
            continue
        occupied |= ndimage.binary_dilation(square, iterations=2)
        image[square] += rng.uniform(0.15, 0.3)
        n_distract -= 1
    image = image + rng.normal(0, noise, image.shape)
    return Sample(image[None].astype(np.float32), mask, boxes_from_mask(mask), STRONG, f"s{index:05d}")


def synth_generate(seed, n, size=64, classes=1, max_blobs=2, noise=0.05, distractors=0, offset=0):
    """``n`` samples; sample ``i`` depends only on ``(seed, offset + i)``."""
    if n < 1:
        raise ConfigError(f"need at least one sample, got n={n}")
    if size < 16 or size % 16:
        raise ConfigError(f"image size must be a positive multiple of 16, got {size}")
    if classes < 1:
        raise ConfigError(f"need at least one foreground class, got {classes}")
    return [synth_sample(np.random.default_rng([seed, offset + i]), size, classes, max_blobs, noise,
                         distractors, offset + i)
            for i in range(n)]


# -- augmentation -----------------------------------------------------------------

def hflip(sample):
    w = sample.image.shape[-1]
    boxes = [Box(w - b.x_max, b.y_min, w - b.x_min, b.y_max, b.class_id) for b in sample.boxes]
    return replace(sample, image=sample.image[..., ::-1].copy(), mask=sample.mask[:, ::-1].copy(), boxes=boxes)


def vflip(sample):
    h = sample.image.shape[-2]
    boxes = [Box(b.x_min, h - b.y_max, b.x_max, h - b.y_min, b.class_id) for b in sample.boxes]
    return replace(sample, image=sample.image[..., ::-1, :].copy(), mask=sample.mask[::-1].copy(), boxes=boxes)


def target_center(sample):
    """(row, col) centre of the target: mask centroid when strong, box-union centre when weak."""
    if sample.kind == STRONG and (sample.mask > 0).any():
        rows, cols = np.nonzero(sample.mask > 0)
        return rows.mean(), cols.mean()
    if sample.boxes:
        arr = np.stack([b.as_array() for b in sample.boxes])
        return ((arr[:, 1].min() + arr[:, 3].max()) / 2, (arr[:, 0].min() + arr[:, 2].max()) / 2)
    h, w = sample.size
    return (h - 1) / 2, (w - 1) / 2


def crop(sample, top, left, size):
    sl = (slice(top, top + size), slice(left, left + size))
    image = sample.image[(slice(None),) + sl].copy()
    mask = sample.mask[sl].copy()
    if sample.kind == STRONG:
        boxes = boxes_from_mask(mask)
    else:
        boxes = []
        for b in sample.boxes:
            x0, x1 = max(b.x_min - left, 0), min(b.x_max - left, size)
            y0, y1 = max(b.y_min - top, 0), min(b.y_max - top, size)
            if x0 < x1 and y0 < y1:
                boxes.append(Box(x0, y0, x1, y1, b.class_id))
    return replace(sample, image=image, mask=mask, boxes=boxes)


def _crop_origin(center, extent, size, rng):
    # keep the centre inside the central half of the window
    lo = int(np.ceil(center - 0.75 * size)) + 1
    hi = int(np.floor(center - 0.25 * size))
    lo, hi = max(lo, 0), min(hi, extent - size)
    if lo > hi:
        return int(np.clip(round(center - size / 2), 0, extent - size))
    return int(rng.integers(lo, hi + 1))


def augment(sample, seed, crop_size=None, noise_sigma=0.05, flip_prob=0.5):
    """Random flips, additive Gaussian image noise and a target-centred crop.

    ``noise_sigma`` is relative to the image's intensity range. Masks and
    boxes follow every geometric transform; noise touches the image only.
    """
    rng = np.random.default_rng(seed)
    h, w = sample.size
    if crop_size is not None and (crop_size > h or crop_size > w):
        raise ConfigError(f"crop {crop_size} exceeds image {h}x{w}")
    out = sample
    if rng.random() < flip_prob:
        out = hflip(out)
    if rng.random() < flip_prob:
        out = vflip(out)
    if noise_sigma > 0:
        spread = float(out.image.max() - out.image.min())
        out = replace(out, image=(out.image + rng.normal(0, noise_sigma * spread, out.image.shape)
                                  ).astype(out.image.dtype))
    if crop_size is not None and crop_size < max(h, w):
        cy, cx = target_center(out)
        out = crop(out, _crop_origin(cy, h, crop_size, rng), _crop_origin(cx, w, crop_size, rng), crop_size)
    return out


# -- normalisation and splitting ----------------------------------------------------

def compute_stats(samples):
    pixels = np.concatenate([s.image.astype(np.float64).ravel() for s in samples])
    mean, std = float(pixels.mean()), float(pixels.std())
    if not std > 0:
        raise DataError("training images have zero intensity spread; cannot normalise")
    return mean, std


def normalize(samples, stats):
    mean, std = stats
    if not std > 0:
        raise DataError(f"normalisation std must be positive, got {std}")
    return [replace(s, image=((s.image.astype(np.float64) - mean) / std).astype(np.float32)) for s in samples]


def split_strong_weak(samples, n_strong, seed):
    """Keep ``n_strong`` uniformly chosen samples strong; demote the rest to weak."""
    n = len(samples)
    if not 0 <= n_strong <= n:
        raise ConfigError(f"n_strong must lie in 0..{n}, got {n_strong}")
    strong = set(np.random.default_rng(seed).permutation(n)[:n_strong].tolist())
    return [replace(s, kind=STRONG if i in strong else WEAK) for i, s in enumerate(samples)]


# -- manifest ------------------------------------------------------------------------

def write_dataset(out_dir, splits, classes=1, stats=None):
    """Write tensors plus ``manifest.json``; ``splits`` maps split name to samples."""
    os.makedirs(os.path.join(out_dir, "tensors"), exist_ok=True)
    if stats is None:
        stats = compute_stats(splits["train"])
    entries = []
    for split, samples in splits.items():
        for s in samples:
            img_rel = os.path.join("tensors", f"{split}_{s.id}_image.msdt")
            mask_rel = os.path.join("tensors", f"{split}_{s.id}_mask.msdt")
            save_tensor(os.path.join(out_dir, img_rel), s.image.astype(np.float32))
            save_tensor(os.path.join(out_dir, mask_rel), s.mask.astype(np.float32))
            entries.append({"id": s.id, "split": split, "kind": s.kind, "image": img_rel,
                            "mask": mask_rel, "boxes": [b.to_list() for b in s.boxes]})
    manifest = {"version": MANIFEST_VERSION, "classes": classes,
                "stats": {"mean": stats[0], "std": stats[1]}, "samples": entries}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def read_dataset(data_dir):
    """Load ``manifest.json``; returns (splits dict, manifest)."""
    path = os.path.join(data_dir, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError as exc:
        raise DataError(f"no manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')!r}")
    splits = {}
    for e in manifest["samples"]:
        try:
            image = load_tensor(os.path.join(data_dir, e["image"]))
            mask = load_tensor(os.path.join(data_dir, e["mask"])).astype(np.int64)
        except (OSError, FormatError) as exc:
            raise DataError(f"sample {e.get('id')}: {exc}") from exc
        boxes = [Box.from_list(b) for b in e["boxes"]]
        splits.setdefault(e["split"], []).append(Sample(image, mask, boxes, e["kind"], e["id"]))
    return splits, manifest


def dataset_stats(manifest) -> Optional[tuple]:
    st = manifest.get("stats")
    return (st["mean"], st["std"]) if st else None
