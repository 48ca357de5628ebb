"""Command-line entry point: gen-data, train, eval, gradcheck, render."""
import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from .data import compute_stats, dataset_stats, normalize, read_dataset, synth_generate, write_dataset
from .errors import ConfigError, DataError, DimensionError, FormatError, SchemaError
from .gradsuite import TOLERANCE, run_suite, suite_passes
from .model import detect
from .tensor import set_default_dtype
from .train import TrainConfig, checkpoint_io, mean_dice, predict_labels, t_interval, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2

# flags whose names differ from the config field they set
_ALIASES = {"size": "image_size"}
_MODEL_CHOICES = ("unet", "unet-unary-sse", "msdn-minus", "msdn")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _field_type(f):
    # annotations are strings here (postponed evaluation)
    name = str(f.type).replace("Optional[", "").rstrip("]")
    return {"int": int, "float": float, "bool": _parse_bool}.get(name, str)


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _add_config_flags(p):
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    reverse = {v: k for k, v in _ALIASES.items()}
    for name, f in fields.items():
        flag = "--" + reverse.get(name, name).replace("_", "-")
        if name == "model":
            p.add_argument(flag, choices=_MODEL_CHOICES, default=None)
        else:
            p.add_argument(flag, dest=name, type=_field_type(f), default=None)


def _resolve_config(args):
    values = {}
    if args.config:
        if not os.path.exists(args.config):
            raise ConfigError(f"config file {args.config} does not exist")
        try:
            with open(args.config) as fh:
                values = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return TrainConfig.from_dict(values)


def _print_config(name, values):
    print(json.dumps({"command": name, **values}, sort_keys=True))
    sys.stdout.flush()


def _load_split(data_dir, split):
    splits, manifest = read_dataset(data_dir)
    if split not in splits:
        raise DataError(f"dataset {data_dir} has no {split!r} split (found {sorted(splits)})")
    stats = dataset_stats(manifest) or compute_stats(splits["train"])
    return normalize(splits[split], stats), splits, stats


def format_interval(means):
    """``mean ± half-width`` of the 95% t-interval; the bare mean for a single run."""
    m, half = t_interval(means)
    return f"{m:.2f} ± {half:.2f}" if len(means) > 1 else f"{m:.2f}"


# -- commands ---------------------------------------------------------------------

def cmd_gen_data(args):
    n_val = args.n_val if args.n_val is not None else max(1, args.n // 2)
    n_test = args.n_test if args.n_test is not None else max(1, args.n // 2)
    _print_config("gen-data", dict(out=args.out, n=args.n, n_val=n_val, n_test=n_test, size=args.size,
                                   seed=args.seed, classes=args.classes, noise=args.noise,
                                   distractors=args.distractors))
    if not args.out:
        raise ConfigError("gen-data needs --out")
    kw = dict(size=args.size, classes=args.classes, noise=args.noise, distractors=args.distractors)
    splits = {"train": synth_generate(args.seed, args.n, **kw),
              "val": synth_generate(args.seed, n_val, offset=args.n, **kw),
              "test": synth_generate(args.seed, n_test, offset=args.n + n_val, **kw)}
    write_dataset(args.out, splits, classes=args.classes)
    print(f"wrote {sum(map(len, splits.values()))} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    config = _resolve_config(args)
    _print_config("train", dict(data=args.data, out=args.out, **config.to_dict()))
    if not args.data:
        raise ConfigError("train needs --data")
    splits, manifest = read_dataset(args.data)
    for need in ("train", "val"):
        if need not in splits:
            raise DataError(f"dataset {args.data} lacks a {need!r} split")
    if manifest.get("classes", 1) != config.num_classes:
        raise ConfigError(f"dataset has {manifest.get('classes')} classes, config asks for {config.num_classes}")
    stats = dataset_stats(manifest) or compute_stats(splits["train"])
    tr, va = normalize(splits["train"], stats), normalize(splits["val"], stats)
    te = normalize(splits["test"], stats) if "test" in splits else None
    out = args.out or "run"
    log, trainer = train(config, tr, va, te, out_dir=out)
    trainer.save(os.path.join(out, "last.msdc"))
    best = log.best_test_dice
    print(f"epochs {trainer.epoch}, best val {max(r.val_dice for r in log.records):.4f}"
          + ("" if best is None else f", best test {best:.4f}"))
    return EXIT_OK


def cmd_eval(args):
    _print_config("eval", dict(data=args.data, split=args.split, checkpoints=args.checkpoints))
    if not args.checkpoints or not args.data:
        raise ConfigError("eval needs --checkpoints and --data")
    samples, _, _ = _load_split(args.data, args.split)
    means = []
    for path in args.checkpoints:
        model = checkpoint_io(None, None, path, "load")[0]
        score = 100 * mean_dice(model, samples)
        means.append(score)
        print(f"{path}: {score:.2f}")
    print(format_interval(means))
    return EXIT_OK


def cmd_gradcheck(args):
    _print_config("gradcheck", dict(instances=args.instances, seed=args.seed, tolerance=TOLERANCE))
    results = run_suite(args.instances, args.seed)
    for name, err in results.items():
        print(f"{name:12s} {err:.3e} {'ok' if err <= TOLERANCE else 'FAIL'}")
    ok = suite_passes(results)
    print("all ops within tolerance" if ok else "gradient check FAILED")
    return EXIT_OK if ok else EXIT_CONFIG


def _write_pgm(path, array):
    """Binary 8-bit PGM; ``array`` is scaled from its own min/max."""
    a = np.asarray(array, dtype=np.float64)
    lo, hi = a.min(), a.max()
    img = np.zeros(a.shape, np.uint8) if hi <= lo else np.round(255 * (a - lo) / (hi - lo)).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _draw_box(canvas, box, value):
    h, w = canvas.shape
    x0, y0 = int(np.clip(np.floor(box[0]), 0, w - 1)), int(np.clip(np.floor(box[1]), 0, h - 1))
    x1, y1 = int(np.clip(np.ceil(box[2]) - 1, 0, w - 1)), int(np.clip(np.ceil(box[3]) - 1, 0, h - 1))
    canvas[y0, x0:x1 + 1] = canvas[y1, x0:x1 + 1] = value
    canvas[y0:y1 + 1, x0] = canvas[y0:y1 + 1, x1] = value


def cmd_render(args):
    _print_config("render", dict(data=args.data, split=args.split, checkpoints=args.checkpoints, out=args.out,
                                 limit=args.limit, threshold=args.threshold))
    if not args.checkpoints or not args.data or not args.out:
        raise ConfigError("render needs --checkpoints, --data and --out")
    samples, _, _ = _load_split(args.data, args.split)
    model = checkpoint_io(None, None, args.checkpoints[0], "load")[0]
    model.eval()
    os.makedirs(args.out, exist_ok=True)
    samples = samples[: args.limit]
    preds = predict_labels(model, np.stack([s.image for s in samples]))
    for s, pred in zip(samples, preds):
        image = s.image[0]
        _write_pgm(os.path.join(args.out, f"{s.id}_image.pgm"), image)
        _write_pgm(os.path.join(args.out, f"{s.id}_pred.pgm"), pred)
        _write_pgm(os.path.join(args.out, f"{s.id}_truth.pgm"), s.mask)
        canvas = (image - image.min()) / max(float(np.ptp(image)), 1e-12) * 0.7
        for b in s.boxes:
            _draw_box(canvas, b.as_array(), 0.85)
        if model.has_detection:
            for b, _ in detect(model, s.image[None], args.threshold)[0]:
                _draw_box(canvas, b.as_array(), 1.0)
        _write_pgm(os.path.join(args.out, f"{s.id}_boxes.pgm"), canvas)
    print(f"rendered {len(samples)} samples to {args.out}")
    return EXIT_OK


# -- wiring -----------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="msdn", description="Mixed-supervision dual-network segmentation.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out")
    p.add_argument("--n", type=int, default=80, help="training samples")
    p.add_argument("--n-val", type=int)
    p.add_argument("--n-test", type=int)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--classes", type=int, default=1)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--distractors", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config")
    p.add_argument("--data")
    p.add_argument("--out")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_text in (("eval", cmd_eval, "mean Dice of checkpoints"),
                                  ("render", cmd_render, "dump masks and boxes as PGM images")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoints", nargs="+")
        p.add_argument("--data")
        p.add_argument("--split", default="test")
        if name == "render":
            p.add_argument("--out")
            p.add_argument("--limit", type=int, default=8)
            p.add_argument("--threshold", type=float, default=0.5)
        p.set_defaults(func=func)

    p = sub.add_parser("gradcheck", help="finite-difference suite over all ops")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def run(argv=None):
    try:
        try:
            set_default_dtype(os.environ.get("MSDN_PRECISION", "f32"))
        except ValueError as exc:
            raise ConfigError(f"MSDN_PRECISION: {exc}") from exc
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigError("no command given; choose one of gen-data, train, eval, gradcheck, render")
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionError, FormatError, SchemaError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    logging.basicConfig(level=os.environ.get("MSDN_LOG", "WARNING"), format="%(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
