"""Dual-network assembly: segmentation and detection U-Nets joined by binary sSE."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionError
from .nn import Conv2d, ConvBNReLU, Module, UpConv2x2, dropout, max_pool_2x2
from .objectives import ANCHOR_RATIOS, ANCHOR_SCALES, Box, decode_boxes, generate_anchors, nms
from .se import SSE
from .tensor import Tensor, channel_softmax, concat, no_grad, relu, sigmoid

STAGE_DILATIONS = (1, 2, 2, 2, 4, 2, 2, 2, 1)
NUM_ANCHORS = len(ANCHOR_SCALES) * len(ANCHOR_RATIOS)
MODEL_KINDS = ("unet", "unet_unary_sse", "msdn_minus", "msdn")
ENCODER_STAGES = 5  # four encoder stages plus the bottleneck


def normalize_kind(kind):
    kind = str(kind).replace("-", "_")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    return kind


def stage_widths(base):
    return [base, 2 * base, 4 * base, 8 * base, 16 * base, 8 * base, 4 * base, 2 * base, base]


class Stage(Module):
    """Two dilated 3x3 conv -> BN -> ReLU layers at one resolution."""

    def __init__(self, in_channels, out_channels, dilation, rng):
        self.conv1 = ConvBNReLU(in_channels, out_channels, dilation, rng)
        self.conv2 = ConvBNReLU(out_channels, out_channels, dilation, rng)

    def forward(self, x):
        return self.conv2(self.conv1(x))


class SubNetwork(Module):
    """Nine-stage U-Net: enc1..enc4, bottleneck, dec1..dec4.

    ``decoder=False`` builds only the contracting half (used when the
    detection decoder would never run).
    """

    def __init__(self, in_channels=1, base=8, rng=None, decoder=True, dropout_rate=0.1):
        if base < 1:
            raise ConfigError(f"base channel width must be positive, got {base}")
        rng = rng if rng is not None else np.random.default_rng(0)
        widths = stage_widths(base)
        self.widths = widths
        self.dropout_rate = dropout_rate
        self.dropout_rng = None
        prev = in_channels
        for i in range(4):
            setattr(self, f"enc{i + 1}", Stage(prev, widths[i], STAGE_DILATIONS[i], rng))
            prev = widths[i]
        self.bottleneck = Stage(prev, widths[4], STAGE_DILATIONS[4], rng)
        self.has_decoder = decoder
        if decoder:
            prev = widths[4]
            for k in range(4):
                w = widths[5 + k]
                setattr(self, f"up{k + 1}", UpConv2x2(prev, w, rng))
                setattr(self, f"dec{k + 1}", Stage(2 * w, w, STAGE_DILATIONS[5 + k], rng))
                prev = w

    def encoder_stages(self):
        return [self.enc1, self.enc2, self.enc3, self.enc4, self.bottleneck]

    def decoder_stages(self):
        return [(self.up1, self.dec1), (self.up2, self.dec2), (self.up3, self.dec3), (self.up4, self.dec4)]

    def _drop(self, x):
        if not self.training or self.dropout_rate == 0:
            return x
        rng = self.dropout_rng if self.dropout_rng is not None else np.random.default_rng(0)
        return dropout(x, self.dropout_rate, rng=rng)

    def encode(self, x, after_stage=None):
        """Encoder + bottleneck outputs; ``after_stage(i, feat)`` may rewrite each one."""
        feats = []
        h = x
        for i, stage in enumerate(self.encoder_stages()):
            if i:
                h = max_pool_2x2(h)
            h = self._drop(stage(h))
            if after_stage is not None:
                h = after_stage(i, h)
            feats.append(h)
        return feats

    def decode(self, feats, after_stage=None):
        if not self.has_decoder:
            raise ConfigError("this sub-network was built without a decoder")
        h = feats[-1]
        outs = []
        for k, (up, stage) in enumerate(self.decoder_stages()):
            h = concat([feats[3 - k], up(h)], axis=1)
            h = self._drop(stage(h))
            if after_stage is not None:
                h = after_stage(ENCODER_STAGES + k, h)
            outs.append(h)
        return outs


class DetectionHead(Module):
    """Shared classifier and regressor towers applied at every decoder stage."""

    def __init__(self, channels=256, num_classes=1, num_anchors=NUM_ANCHORS, depth=4, rng=None, prior=0.01):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.num_classes, self.num_anchors = num_classes, num_anchors
        self.cls_tower = [Conv2d(channels, channels, 3, rng=rng) for _ in range(depth)]
        self.box_tower = [Conv2d(channels, channels, 3, rng=rng) for _ in range(depth)]
        self.cls_out = Conv2d(channels, num_classes * num_anchors, 3, rng=rng)
        self.box_out = Conv2d(channels, 4 * num_anchors, 3, rng=rng)
        for layer in (self.cls_out, self.box_out):
            layer.weight.data[...] = rng.normal(0, 0.01, layer.weight.shape)
        self.cls_out.bias.data[...] = -np.log((1 - prior) / prior)

    def forward(self, feat):
        c = feat
        for conv in self.cls_tower:
            c = relu(conv(c))
        b = feat
        for conv in self.box_tower:
            b = relu(conv(b))
        return {"cls": sigmoid(self.cls_out(c)), "box": self.box_out(b)}


class MSDN(Module):
    """One of the four compared networks, selected by ``kind``.

    * ``unet``: the segmentation sub-network alone.
    * ``unet_unary_sse``: unary sSE after every one of the nine stages.
    * ``msdn_minus``: dual network with binary sSE connectors, no detection unit.
    * ``msdn``: the full model with a shared detection unit on every decoder stage.
    """

    def __init__(self, kind="msdn", in_channels=1, num_classes=1, base_channels=8,
                 head_channels=256, dropout_rate=0.1, seed=0):
        kind = normalize_kind(kind)
        if num_classes < 1:
            raise ConfigError(f"need at least one foreground class, got {num_classes}")
        if head_channels < 1:
            raise ConfigError(f"head width must be positive, got {head_channels}")
        rng = np.random.default_rng(seed)
        self.kind = kind
        self.num_classes = num_classes
        self.config = dict(kind=kind, in_channels=in_channels, num_classes=num_classes,
                           base_channels=base_channels, head_channels=head_channels,
                           dropout_rate=dropout_rate, seed=seed)
        self.seg = SubNetwork(in_channels, base_channels, rng, dropout_rate=dropout_rate)
        self.seg_unit = Conv2d(base_channels, num_classes + 1, 1, rng=rng)
        widths = self.seg.widths
        if kind in ("msdn", "msdn_minus"):
            self.det = SubNetwork(in_channels, base_channels, rng, decoder=kind == "msdn",
                                  dropout_rate=dropout_rate)
            self.connectors = [SSE(widths[i]) for i in range(ENCODER_STAGES)]
        if kind == "unet_unary_sse":
            self.unary = [SSE(w) for w in widths]
        if kind == "msdn":
            self.det_lateral = [Conv2d(widths[5 + k], head_channels, 1, rng=rng) for k in range(4)]
            self.det_unit = DetectionHead(head_channels, num_classes, rng=rng)

    @property
    def has_detection(self):
        return self.kind == "msdn"

    @property
    def has_dual(self):
        return self.kind in ("msdn", "msdn_minus")

    def set_dropout_rng(self, rng):
        self.seg.dropout_rng = rng
        if self.has_dual:
            self.det.dropout_rng = rng

    @staticmethod
    def _check_input(image):
        if image.ndim != 4:
            raise DimensionError(f"expected an N,C,H,W image batch, got shape {image.shape}")
        h, w = image.shape[2:]
        if h % 16 or w % 16:
            raise DimensionError(f"spatial dims must be divisible by 16, got {h}x{w}")

    def segment_logits(self, image, connectors=True):
        self._check_input(image)
        hook = None
        if self.has_dual and connectors:
            det_feats = self.det.encode(image)

            def hook(i, feat):
                return self.connectors[i](feat, squeeze_from=det_feats[i])
        elif self.kind == "unet_unary_sse":
            def hook(i, feat):
                return self.unary[i](feat)
        feats = self.seg.encode(image, hook)
        dec_hook = hook if self.kind == "unet_unary_sse" else None
        out = self.seg.decode(feats, dec_hook)[-1]
        return self.seg_unit(out)

    def forward_strong(self, image):
        """Per-pixel class probabilities [N, C+1, H, W]."""
        return channel_softmax(self.segment_logits(image), axis=1)

    def forward_weak(self, image):
        """Detection outputs at the four decoder stages (coarse to fine)."""
        if not self.has_detection:
            raise ConfigError(f"model kind {self.kind!r} has no detection unit")
        self._check_input(image)
        outs = self.det.decode(self.det.encode(image))
        return [self.det_unit(lat(f)) for lat, f in zip(self.det_lateral, outs)]

    def forward(self, image):
        out = {"seg": self.forward_strong(image)}
        if self.has_detection:
            out["det"] = self.forward_weak(image)
        return out

    def detection_stage_shapes(self, image_shape):
        h, w = image_shape
        return [(h // 8, w // 8), (h // 4, w // 4), (h // 2, w // 2), (h, w)]


def build_msdn(kind="msdn", num_classes=1, base_channels=8, head_channels=256, dropout_rate=0.1,
               seed=0, in_channels=1):
    return MSDN(kind, in_channels, num_classes, base_channels, head_channels, dropout_rate, seed)


def forward_variant(model, image):
    return model.forward(image)


def count_parameters(model):
    return int(sum(p.size for p in model.parameters()))


def detect(model, images, threshold=0.5, iou_threshold=0.5):
    """Decoded detections per image: lists of ``(Box, score)`` after NMS, clipped to the image."""
    if not model.has_detection:
        raise ConfigError(f"model kind {model.kind!r} has no detection unit")
    images = np.asarray(images, dtype=np.float32)
    h, w = images.shape[-2:]
    anchors = np.concatenate(generate_anchors(model.detection_stage_shapes((h, w)), (h, w)))
    k = model.num_classes
    was_training = model.training
    model.eval()
    results = []
    with no_grad():
        for x in images:
            outs = model.forward_weak(Tensor(x[None]))
            cls = np.concatenate([o["cls"].data[0].transpose(1, 2, 0).reshape(-1, k) for o in outs])
            off = np.concatenate([o["box"].data[0].transpose(1, 2, 0).reshape(-1, 4) for o in outs])
            score, label = cls.max(axis=1), cls.argmax(axis=1) + 1
            keep = np.flatnonzero(score >= threshold)
            boxes = np.clip(decode_boxes(anchors[keep], off[keep].astype(np.float64)), 0, [w, h, w, h])
            found = []
            for j in nms(boxes, score[keep], iou_threshold):
                x0, y0, x1, y1 = boxes[j]
                if x1 > x0 and y1 > y0:
                    found.append((Box(x0, y0, x1, y1, int(label[keep[j]])), float(score[keep[j]])))
            results.append(found)
    model.train(was_training)
    return results
