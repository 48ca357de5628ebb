"""Mixed-supervision training loop, Adam, plateau schedule, checkpoints, evaluation."""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import stats as sps

from .data import STRONG, WEAK, augment, split_strong_weak
from .errors import ConfigError, FormatError, SchemaError
from .model import MODEL_KINDS, MSDN, build_msdn, normalize_kind
from .objectives import dice_loss, dice_score, detection_loss, generate_anchors, match_and_encode, total_loss
from .tensor import Tensor, no_grad, tensor_from_bytes, tensor_to_bytes

logger = logging.getLogger(__name__)

RUNLOG_HEADER = "epoch,seg_loss,det_loss,val_dice,test_dice,lr"


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    plateau_factor: float = 0.8
    plateau_patience: int = 5
    early_stop_patience: int = 20
    max_epochs: int = 300
    improve_tol: float = 1e-6
    dropout: float = 0.1
    model: str = "msdn"
    n_strong: Optional[int] = None
    seed: int = 0
    split_seed: int = 0
    image_size: int = 64
    base_channels: int = 8
    head_channels: int = 256
    num_classes: int = 1
    augment: bool = True
    crop_size: Optional[int] = None
    noise_sigma: float = 0.05
    flip_prob: float = 0.5
    dice_smooth: float = 1e-5
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    det_on_strong: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        self.model = normalize_kind(self.model)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigError("patience values must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ConfigError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_epochs < 0:
            raise ConfigError(f"max_epochs must be >= 0, got {self.max_epochs}")

    @classmethod
    def from_dict(cls, values):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc

    def to_dict(self):
        return dataclasses.asdict(self)


# -- optimizer ------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam. Parameters without a gradient this step are skipped."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.step_count = 0
        self.m = {}
        self.v = {}

    def step(self, named_params):
        self.step_count += 1
        t = self.step_count
        named_params = list(named_params)
        for name, p in named_params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                bad = int((~np.isfinite(p.grad)).sum())
                raise FloatingPointError(f"non-finite gradient in {name}: {bad} of {p.grad.size} entries "
                                         f"(step {t}, lr {self.lr})")
        c1 = 1 - self.beta1 ** t
        c2 = 1 - self.beta2 ** t
        for name, p in named_params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.data.dtype, copy=False)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def adam_step(params, grads, state, lr):
    """Functional form: ``params``/``grads`` map names to arrays, ``state`` is an :class:`Adam`."""
    state.lr = lr
    wrapped = []
    for name, value in params.items():
        t = Tensor(value, dtype=value.dtype)
        t.grad = grads.get(name)
        wrapped.append((name, t))
    state.step(wrapped)
    return {name: t.data for name, t in wrapped}, state


# -- schedule -------------------------------------------------------------------

@dataclass
class PlateauSchedule:
    """Reduce-on-plateau plus early stopping, driven by validation Dice.

    The first observation sets the baseline. The plateau counter resets on
    improvement and on every reduction; the stop counter resets only on
    improvement.
    """

    lr: float = 1e-4
    factor: float = 0.8
    patience: int = 5
    stop_patience: int = 20
    tol: float = 1e-6
    best: float = -math.inf
    since_improve: int = 0
    since_reduce: int = 0
    reductions: int = 0
    initial_lr: float = field(default=None)

    def __post_init__(self):
        if self.initial_lr is None:
            self.initial_lr = self.lr

    def step(self, score):
        """Returns ``(lr, stop, improved)`` after observing one epoch's score."""
        if score > self.best + self.tol:
            self.best = score
            self.since_improve = 0
            self.since_reduce = 0
            return self.lr, False, True
        self.since_improve += 1
        self.since_reduce += 1
        if self.since_reduce >= self.patience:
            self.reductions += 1
            self.lr = self.initial_lr * self.factor ** self.reductions
            self.since_reduce = 0
        return self.lr, self.since_improve >= self.stop_patience, False

    def state(self):
        return np.array([self.lr, self.best, self.since_improve, self.since_reduce, self.reductions,
                         self.initial_lr], dtype=np.float64)

    def load(self, arr):
        self.lr, self.best = float(arr[0]), float(arr[1])
        self.since_improve, self.since_reduce, self.reductions = (int(v) for v in arr[2:5])
        self.initial_lr = float(arr[5])


def schedule_and_stop(val_dices, config):
    """Replay a validation trace; returns the final (lr, stop) and per-epoch lrs."""
    sched = PlateauSchedule(config.lr, config.plateau_factor, config.plateau_patience,
                            config.early_stop_patience, config.improve_tol)
    lrs, stop = [], False
    for v in val_dices:
        lr, stop, _ = sched.step(v)
        lrs.append(lr)
        if stop:
            break
    return sched.lr, stop, lrs


# -- run log --------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    seg_loss: Optional[float]
    det_loss: Optional[float]
    val_dice: float
    test_dice: Optional[float]
    lr: float

    def csv(self):
        def f(v):
            return "" if v is None else f"{v:.6f}"
        return f"{self.epoch},{f(self.seg_loss)},{f(self.det_loss)},{self.val_dice:.6f},{f(self.test_dice)},{self.lr:.10g}"

    def as_array(self):
        nan = float("nan")
        return [self.epoch, nan if self.seg_loss is None else self.seg_loss,
                nan if self.det_loss is None else self.det_loss, self.val_dice,
                nan if self.test_dice is None else self.test_dice, self.lr]

    @classmethod
    def from_array(cls, row):
        def opt(v):
            return None if math.isnan(v) else float(v)
        return cls(int(row[0]), opt(row[1]), opt(row[2]), float(row[3]), opt(row[4]), float(row[5]))


@dataclass
class RunLog:
    records: list = field(default_factory=list)

    def append(self, rec):
        self.records.append(rec)

    def to_csv(self):
        return "\n".join([RUNLOG_HEADER] + [r.csv() for r in self.records]) + "\n"

    def write(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @property
    def best_test_dice(self):
        tests = [r.test_dice for r in self.records if r.test_dice is not None]
        return max(tests) if tests else None

    def as_array(self):
        return np.array([r.as_array() for r in self.records], dtype=np.float64).reshape(-1, 6)

    @classmethod
    def from_array(cls, arr):
        return cls([EpochRecord.from_array(row) for row in np.asarray(arr).reshape(-1, 6)])


# -- checkpoints ------------------------------------------------------------------

CKPT_MAGIC = b"MSDC"
_MODEL_KEYS = ("in_channels", "num_classes", "base_channels", "head_channels", "dropout_rate", "seed")


def write_checkpoint(path, tensors):
    """Write a name -> array mapping in the checkpoint container layout."""
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(tensor_to_bytes(np.asarray(arr)))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def read_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise FormatError("bad checkpoint magic", 0)
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header", 4)
    (count,) = struct.unpack_from("<I", buf, 4)
    offset = 8
    out = {}
    for _ in range(count):
        if len(buf) < offset + 2:
            raise FormatError("truncated entry name length", offset)
        (n,) = struct.unpack_from("<H", buf, offset)
        offset += 2
        if len(buf) < offset + n:
            raise FormatError("truncated entry name", offset)
        name = buf[offset:offset + n].decode("utf-8")
        offset += n
        arr, offset = tensor_from_bytes(buf, offset)
        out[name] = arr
    if offset != len(buf):
        raise FormatError("trailing bytes after last entry", offset)
    return out


def model_from_tensors(tensors):
    try:
        cfg = {k: tensors[f"config.{k}"].item() for k in _MODEL_KEYS}
        kind = MODEL_KINDS[int(tensors["config.kind"].item())]
    except KeyError as exc:
        raise SchemaError(f"checkpoint lacks model config entry {exc}") from exc
    model = MSDN(kind, int(cfg["in_channels"]), int(cfg["num_classes"]), int(cfg["base_channels"]),
                 int(cfg["head_channels"]), float(cfg["dropout_rate"]), int(cfg["seed"]))
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    return model


def checkpoint_io(model, optimizer, path, direction, extra=None):
    """Save (``direction='save'``) or load a model plus optimizer state.

    On load, returns ``(model, optimizer, extra)`` where ``extra`` holds the
    remaining ``state.*`` entries. Loading is all-or-nothing.
    """
    if direction == "save":
        tensors = {f"config.{k}": np.array([float(model.config[k])]) for k in _MODEL_KEYS}
        tensors["config.kind"] = np.array([float(MODEL_KINDS.index(model.kind))])
        for k, v in model.state_dict().items():
            tensors[f"model.{k}"] = v
        if optimizer is not None:
            tensors["adam.step"] = np.array([float(optimizer.step_count)])
            tensors["adam.hyper"] = np.array([optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps])
            for k in optimizer.m:
                tensors[f"adam.m.{k}"] = optimizer.m[k]
                tensors[f"adam.v.{k}"] = optimizer.v[k]
        for k, v in (extra or {}).items():
            tensors[f"state.{k}"] = np.asarray(v, dtype=np.float64)
        write_checkpoint(path, tensors)
        return None
    if direction != "load":
        raise ConfigError(f"direction must be 'save' or 'load', got {direction!r}")
    tensors = read_checkpoint(path)
    allowed = ("config.", "model.", "adam.", "state.")
    stray = [k for k in tensors if not k.startswith(allowed)]
    if stray:
        raise SchemaError(f"unknown checkpoint entries: {stray[:5]}")
    model = model_from_tensors(tensors)
    opt = None
    if "adam.step" in tensors:
        lr, b1, b2, eps = tensors["adam.hyper"]
        opt = Adam(float(lr), float(b1), float(b2), float(eps))
        opt.step_count = int(tensors["adam.step"].item())
        names = dict(model.named_parameters())
        for k, v in tensors.items():
            for slot, store in (("adam.m.", opt.m), ("adam.v.", opt.v)):
                if k.startswith(slot):
                    pname = k[len(slot):]
                    if pname not in names:
                        raise SchemaError(f"optimizer state for unknown parameter {pname!r}")
                    store[pname] = v.astype(names[pname].data.dtype)
    extra = {k[6:]: v for k, v in tensors.items() if k.startswith("state.")}
    return model, opt, extra


# -- evaluation -------------------------------------------------------------------

def predict_labels(model, images, batch_size=8):
    """Argmax label maps [N,H,W] in eval mode."""
    was_training = model.training
    model.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            x = Tensor(np.asarray(images[i:i + batch_size], dtype=np.float32))
            out.append(model.forward_strong(x).data.argmax(axis=1))
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros((0,), dtype=np.int64)


def mean_dice(model, samples, batch_size=8):
    if not samples:
        raise ConfigError("cannot evaluate on an empty split")
    preds = predict_labels(model, np.stack([s.image for s in samples]), batch_size)
    scores = []
    for pred, s in zip(preds, samples):
        per_class = [dice_score(pred, s.mask, c) for c in range(1, model.num_classes + 1)]
        scores.append(float(np.mean(per_class)))
    return float(np.mean(scores))


def t_interval(values, confidence=0.95):
    """Mean and half-width of the two-sided Student-t interval over run means."""
    values = np.asarray(values, dtype=np.float64)
    m = float(values.mean())
    if len(values) < 2:
        return m, float("nan")
    s = float(values.std(ddof=1))
    t = float(sps.t.ppf(0.5 + confidence / 2, len(values) - 1))
    return m, t * s / math.sqrt(len(values))


def evaluate(checkpoint, samples):
    """Mean foreground Dice of one checkpoint (path or model) on ``samples``."""
    model = checkpoint if isinstance(checkpoint, MSDN) else checkpoint_io(None, None, checkpoint, "load")[0]
    return mean_dice(model, samples)


# -- training ---------------------------------------------------------------------

def _stack_images(samples):
    return Tensor(np.stack([s.image for s in samples]).astype(np.float32))


class Trainer:
    """Runs the epoch loop for one configuration on fixed train/val/test splits."""

    def __init__(self, config, train_samples, val_samples, test_samples=None, out_dir=None):
        self.config = config
        kind = config.model
        if config.n_strong is not None:
            train_samples = split_strong_weak(train_samples, config.n_strong, config.split_seed)
        if kind in ("unet", "unet_unary_sse", "msdn_minus"):
            pool = [s for s in train_samples if s.kind == STRONG]
            if not pool:
                raise ConfigError(f"model kind {kind!r} trains on strong data only, but none is present")
        else:
            pool = list(train_samples)
        self.pool = pool
        self.val = list(val_samples)
        self.test = list(test_samples or [])
        self.out_dir = out_dir
        self.model = build_msdn(kind, config.num_classes, config.base_channels, config.head_channels,
                                config.dropout, config.seed)
        self.optimizer = Adam(config.lr, config.beta1, config.beta2, config.adam_eps)
        self.schedule = PlateauSchedule(config.lr, config.plateau_factor, config.plateau_patience,
                                        config.early_stop_patience, config.improve_tol)
        self.log = RunLog()
        self.epoch = -1
        self.stopped = False
        self.best_state = None
        if self.model.has_detection:
            size = self.pool[0].image.shape[-2:] if config.crop_size is None else (config.crop_size,) * 2
            self.anchors = generate_anchors(self.model.detection_stage_shapes(size), size)

    # one optimisation step on a list of samples
    def step(self, batch, epoch, index):
        cfg = self.config
        model = self.model
        strong = [s for s in batch if s.kind == STRONG]
        weak = [s for s in batch if s.kind == WEAK]
        if not model.has_detection:
            weak = []
        elif cfg.det_on_strong:
            weak = weak + strong
        model.zero_grad()
        model.set_dropout_rng(np.random.default_rng([cfg.seed, epoch, index, 1]))
        seg = cls = box = None
        if strong:
            probs = model.forward_strong(_stack_images(strong))
            seg = dice_loss(probs, np.stack([s.mask for s in strong]), cfg.dice_smooth)
        if weak:
            outs = model.forward_weak(_stack_images(weak))
            targets = [[match_and_encode(a, s.boxes, cfg.num_classes) for a in self.anchors] for s in weak]
            cls, box = detection_loss(outs, targets, cfg.num_classes, cfg.focal_alpha, cfg.focal_gamma,
                                      cfg.smooth_l1_beta)
        if seg is None and cls is None:
            return None, None
        total = total_loss(seg, cls, box)
        total.backward()
        self.optimizer.lr = self.schedule.lr
        self.optimizer.step(model.named_parameters())
        det = None if cls is None else cls.item() + box.item()
        return (None if seg is None else seg.item()), det

    def run_epoch(self, epoch):
        cfg = self.config
        order = np.random.default_rng([cfg.seed, epoch, 0]).permutation(len(self.pool))
        seg_losses, det_losses = [], []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            batch = [self.pool[i] for i in idx]
            if cfg.augment:
                batch = [augment(s, [cfg.seed, epoch, int(i), 2], cfg.crop_size, cfg.noise_sigma, cfg.flip_prob)
                         for s, i in zip(batch, idx)]
            seg, det = self.step(batch, epoch, b)
            if seg is not None:
                seg_losses.append(seg)
            if det is not None:
                det_losses.append(det)
        return (float(np.mean(seg_losses)) if seg_losses else None,
                float(np.mean(det_losses)) if det_losses else None)

    def _observe(self, epoch, seg, det):
        val = mean_dice(self.model, self.val)
        lr_used = self.schedule.lr
        _, stop, improved = self.schedule.step(val)
        test = None
        if improved:
            if self.test:
                test = mean_dice(self.model, self.test)
            self.best_state = {k: v.copy() for k, v in self.model.state_dict().items()}
            if self.out_dir:
                checkpoint_io(self.model, None, os.path.join(self.out_dir, "best.msdc"), "save")
        rec = EpochRecord(epoch, seg, det, val, test, lr_used)
        self.log.append(rec)
        logger.info(rec.csv())
        self.stopped = stop
        return rec

    def fit(self, epochs=None):
        """Train until early stop, ``max_epochs``, or ``epochs`` more epochs."""
        target = self.config.max_epochs if epochs is None else min(self.epoch + epochs, self.config.max_epochs)
        if self.epoch < 0:
            self.epoch = 0
            self._observe(0, None, None)
        while not self.stopped and self.epoch < target:
            self.epoch += 1
            seg, det = self.run_epoch(self.epoch)
            self._observe(self.epoch, seg, det)
        if self.out_dir:
            self.log.write(os.path.join(self.out_dir, "runlog.csv"))
        return self.log

    def save(self, path):
        extra = {"epoch": [self.epoch], "stopped": [float(self.stopped)],
                 "schedule": self.schedule.state(), "log": self.log.as_array()}
        checkpoint_io(self.model, self.optimizer, path, "save", extra)

    def resume(self, path):
        model, opt, extra = checkpoint_io(None, None, path, "load")
        if model.kind != self.model.kind:
            raise ConfigError(f"checkpoint holds a {model.kind!r} model, config asks for {self.model.kind!r}")
        self.model.load_state_dict(model.state_dict())
        if opt is not None:
            self.optimizer = opt
        self.epoch = int(extra["epoch"].item())
        self.stopped = bool(extra["stopped"].item())
        self.schedule.load(extra["schedule"])
        self.log = RunLog.from_array(extra["log"])
        return self


def train(config, train_samples, val_samples, test_samples=None, out_dir=None):
    """Train one model; returns ``(RunLog, trainer)`` with the best state on the trainer."""
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    trainer = Trainer(config, train_samples, val_samples, test_samples, out_dir)
    log = trainer.fit()
    return log, trainer
