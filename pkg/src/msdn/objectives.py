"""Losses, anchor machinery and the Dice metric."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError
from .tensor import absolute, as_tensor, clip, log, mul, power, reshape, take, transpose, tsum, where

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1
ANCHOR_SCALES = (2 ** 0, 2 ** (1 / 3), 2 ** (2 / 3))
ANCHOR_RATIOS = (0.5, 1.0, 2.0)
BASE_SIZES_AT_64 = (32, 16, 8, 4)


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_id: int = 1

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise DataError(f"degenerate box {self}")

    def as_array(self):
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def to_list(self):
        return [float(self.x_min), float(self.y_min), float(self.x_max), float(self.y_max), int(self.class_id)]

    @classmethod
    def from_list(cls, values):
        return cls(*values[:4], *(int(v) for v in values[4:5]))


# -- segmentation ---------------------------------------------------------------

def one_hot(labels, num_channels, dtype=np.float32):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= num_channels):
        raise DataError(f"labels must lie in 0..{num_channels - 1}, got range "
                        f"[{labels.min()}, {labels.max()}]")
    out = np.zeros((labels.shape[0], num_channels) + labels.shape[1:], dtype=dtype)
    for c in range(num_channels):
        out[:, c] = labels == c
    return out


def dice_loss(probs, mask, smooth=1e-5):
    """Squared-denominator soft Dice over foreground classes, averaged.

    ``probs`` is [N,C+1,H,W] (channel-normalised), ``mask`` an integer label
    map [N,H,W]. Sums run over the whole batch.
    """
    probs = as_tensor(probs)
    mask = np.asarray(mask)
    if mask.shape != (probs.shape[0],) + probs.shape[2:]:
        raise DimensionError(f"mask {mask.shape} does not match probs {probs.shape}")
    n_channels = probs.shape[1]
    g = one_hot(mask.astype(np.int64), n_channels, dtype=probs.dtype)
    ratios = []
    for c in range(1, n_channels):
        p = probs[:, c]
        gc = g[:, c]
        num = tsum(mul(p, gc)) * 2.0 + smooth
        den = tsum(mul(p, p)) + float((gc * gc).sum()) + smooth
        ratios.append(num / den)
    total = ratios[0]
    for r in ratios[1:]:
        total = total + r
    return 1.0 - total * (1.0 / len(ratios))


def dice_score(pred_labels, true_labels, c=1):
    pred_labels = np.asarray(pred_labels)
    true_labels = np.asarray(true_labels)
    if pred_labels.shape != true_labels.shape:
        raise DimensionError(f"label maps differ in shape: {pred_labels.shape} vs {true_labels.shape}")
    p = pred_labels == c
    g = true_labels == c
    denom = int(p.sum()) + int(g.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & g).sum()) / denom


# -- anchors ----------------------------------------------------------------------

def default_base_sizes(image_size):
    return tuple(b * image_size / 64 for b in BASE_SIZES_AT_64)


def cell_anchors(base, scales=ANCHOR_SCALES, ratios=ANCHOR_RATIOS):
    """Widths and heights of the A anchors at one cell; ratio is height/width."""
    sizes = []
    for s in scales:
        for r in ratios:
            side = base * s
            sizes.append((side / np.sqrt(r), side * np.sqrt(r)))
    return np.array(sizes)


def generate_anchors(stage_shapes, image_shape, base_sizes=None, scales=ANCHOR_SCALES, ratios=ANCHOR_RATIOS):
    """Anchors per stage as [h*w*A, 4] arrays of (x_min, y_min, x_max, y_max).

    Ordering is row-major over cells, then anchor index within a cell.
    """
    img_h, img_w = image_shape
    if base_sizes is None:
        base_sizes = default_base_sizes(img_h)
    out = []
    for (h, w), base in zip(stage_shapes, base_sizes):
        if h < 1 or w < 1:
            raise DimensionError(f"stage shape must be positive, got {(h, w)}")
        sy, sx = img_h / h, img_w / w
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * sy, (np.arange(w) + 0.5) * sx, indexing="ij")
        wh = cell_anchors(base, scales, ratios)
        centers = np.stack([cx.ravel(), cy.ravel()], axis=1)[:, None, :]
        half = wh[None, :, :] / 2
        boxes = np.concatenate([centers - half, centers + half], axis=2)
        out.append(boxes.reshape(-1, 4))
    return out


def box_iou(a, b):
    """Pairwise IoU between [K,4] and [G,4] arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(rb - lt, 0, None).prod(axis=2)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_boxes(anchors, gt):
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    wa, ha = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    xa, ya = anchors[:, 0] + wa / 2, anchors[:, 1] + ha / 2
    wg, hg = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    xg, yg = gt[:, 0] + wg / 2, gt[:, 1] + hg / 2
    return np.stack([(xg - xa) / wa, (yg - ya) / ha, np.log(wg / wa), np.log(hg / ha)], axis=1)


def decode_boxes(anchors, offsets):
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    offsets = np.asarray(offsets, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(offsets)):
        raise DataError("box offsets must be finite")
    wa, ha = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    xa, ya = anchors[:, 0] + wa / 2, anchors[:, 1] + ha / 2
    x = xa + offsets[:, 0] * wa
    y = ya + offsets[:, 1] * ha
    w = wa * np.exp(offsets[:, 2])
    h = ha * np.exp(offsets[:, 3])
    return np.stack([x - w / 2, y - h / 2, x + w / 2, y + h / 2], axis=1)


@dataclass
class BoxTargets:
    state: np.ndarray      # [K] POSITIVE / NEGATIVE / IGNORE
    classes: np.ndarray    # [K, C] one-hot for positives, zeros elsewhere
    offsets: np.ndarray    # [K, 4], meaningful only for positives
    matched: np.ndarray    # [K] index of the matched gt, -1 when none

    @property
    def num_positive(self):
        return int((self.state == POSITIVE).sum())

    def __getitem__(self, index):
        return BoxTargets(self.state[index], self.classes[index], self.offsets[index], self.matched[index])

    @staticmethod
    def concatenate(parts):
        return BoxTargets(*(np.concatenate([getattr(p, f) for p in parts])
                            for f in ("state", "classes", "offsets", "matched")))


def match_and_encode(anchors, gt_boxes, num_classes=1, pos_iou=0.5, neg_iou=0.4):
    """Assign each anchor to a gt box by IoU and encode regression targets.

    Anchors at IoU >= ``pos_iou`` are positive, below ``neg_iou`` negative,
    otherwise ignored; every gt additionally claims its best anchor.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    k = len(anchors)
    state = np.full(k, NEGATIVE, dtype=np.int8)
    classes = np.zeros((k, num_classes), dtype=np.float32)
    offsets = np.zeros((k, 4), dtype=np.float64)
    matched = np.full(k, -1, dtype=np.int64)
    boxes = [b if isinstance(b, Box) else Box.from_list(b) for b in gt_boxes]
    if not boxes:
        return BoxTargets(state, classes, offsets, matched)
    gt = np.stack([b.as_array() for b in boxes])
    iou = box_iou(anchors, gt)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(k), best_gt]
    state[best_iou >= neg_iou] = IGNORE
    pos = best_iou >= pos_iou
    matched[pos] = best_gt[pos]
    for g in range(len(gt)):
        a = int(iou[:, g].argmax())
        if iou[a, g] > 0:
            pos[a] = True
            matched[a] = g
    state[pos] = POSITIVE
    idx = np.flatnonzero(pos)
    offsets[idx] = encode_boxes(anchors[idx], gt[matched[idx]])
    for i in idx:
        cid = boxes[matched[i]].class_id
        if not 1 <= cid <= num_classes:
            raise DataError(f"box class {cid} outside 1..{num_classes}")
        classes[i, cid - 1] = 1.0
    return BoxTargets(state, classes, offsets, matched)


# -- detection losses -------------------------------------------------------------

def _prob_eps(dtype):
    return 1e-12 if dtype == np.float64 else 1e-6


def focal_loss(cls_probs, targets, alpha=0.25, gamma=2.0, normalizer=None):
    """Sigmoid focal loss over non-ignored anchors, divided by max(1, #positives)."""
    cls_probs = as_tensor(cls_probs)
    keep = targets.state != IGNORE
    if normalizer is None:
        normalizer = max(1, targets.num_positive)
    if not keep.any():
        return tsum(cls_probs) * 0.0
    p = cls_probs if keep.all() else take(cls_probs, np.flatnonzero(keep))
    t = targets.classes[keep].astype(p.dtype).reshape(p.shape)
    eps = _prob_eps(p.dtype)
    p = clip(p, eps, 1 - eps)
    p_t = mul(p, 2 * t - 1) + (1 - t)
    alpha_t = np.where(t == 1, alpha, 1 - alpha).astype(p.dtype)
    weight = power(1.0 - p_t, gamma) if gamma != 0 else 1.0
    per_entry = mul(mul(log(p_t), weight), -alpha_t)
    return tsum(per_entry) * (1.0 / normalizer)


def smooth_l1(box_preds, targets, beta=1.0, normalizer=None):
    if beta <= 0:
        raise ConfigError(f"smooth-L1 beta must be positive, got {beta}")
    box_preds = as_tensor(box_preds)
    pos = np.flatnonzero(targets.state == POSITIVE)
    if normalizer is None:
        normalizer = max(1, len(pos))
    if len(pos) == 0:
        return tsum(box_preds) * 0.0
    d = take(box_preds, pos) - targets.offsets[pos].astype(box_preds.dtype)
    ad = absolute(d)
    per = where(ad.data < beta, mul(d, d) * (0.5 / beta), ad - 0.5 * beta)
    return tsum(per) * (1.0 / normalizer)


def smooth_l1_value(d, beta=1.0):
    d = np.abs(np.asarray(d, dtype=np.float64))
    return np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)


def flatten_stage(cls_out, box_out, num_classes):
    """[N,C*A,h,w] and [N,4*A,h,w] to per-sample [h*w*A, C] and [h*w*A, 4] rows."""
    n = cls_out.shape[0]
    cls = reshape(transpose(cls_out, (0, 2, 3, 1)), (n, -1, num_classes))
    box = reshape(transpose(box_out, (0, 2, 3, 1)), (n, -1, 4))
    return cls, box


def detection_loss(stage_outputs, targets, num_classes=1, alpha=0.25, gamma=2.0, beta=1.0):
    """Focal and smooth-L1 terms, each summed over decoder stages.

    ``stage_outputs`` is a list of {"cls", "box"} dicts, ``targets`` a list
    (one per sample) of per-stage BoxTargets lists. Both terms are divided
    by the batch's total positive count over all stages.
    """
    n_pos = sum(t.num_positive for per_sample in targets for t in per_sample)
    norm = max(1, n_pos)
    cls_total = box_total = None
    for s, out in enumerate(stage_outputs):
        cls, box = flatten_stage(out["cls"], out["box"], num_classes)
        tgt = BoxTargets.concatenate([per_sample[s] for per_sample in targets])
        cls_flat = cls.reshape(-1, num_classes)
        box_flat = box.reshape(-1, 4)
        fl = focal_loss(cls_flat, tgt, alpha, gamma, normalizer=norm)
        sl = smooth_l1(box_flat, tgt, beta, normalizer=norm)
        cls_total = fl if cls_total is None else cls_total + fl
        box_total = sl if box_total is None else box_total + sl
    return cls_total, box_total


def total_loss(seg_loss=None, det_cls_loss=None, det_box_loss=None):
    terms = [t for t in (seg_loss, det_cls_loss, det_box_loss) if t is not None]
    if not terms:
        raise DataError("total_loss needs at least one loss term")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def nms(boxes, scores, iou_threshold=0.5, max_boxes=10):
    """Greedy non-maximum suppression; returns kept indices by descending score."""
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    boxes = np.asarray(boxes, dtype=np.float64)
    while order.size and len(keep) < max_boxes:
        i = order[0]
        keep.append(int(i))
        if order.size == 1:
            break
        ious = box_iou(boxes[i], boxes[order[1:]])[0]
        order = order[1:][ious < iou_threshold]
    return keep
