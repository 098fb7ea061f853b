"""Command-line surface: train, eval, infer, bench, inspect.

Exit codes are disjoint and stable:

    0  success
    2  configuration error (also argparse usage errors)
    3  dataset error (layout, manifest, labels)
    4  numeric abort (non-finite loss)
    5  checkpoint error (magic/version/integrity/config/shape)
    6  undecodable input image

Errors print one machine-parseable line on stderr: ``error: <kind>: <detail>``.
"""

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .data import (
    IMAGE_SUFFIXES,
    DatasetError,
    DecodeError,
    letterbox,
    load_dataset,
    load_image,
    parse_kv_file,
)
from .model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    build,
    load_checkpoint,
    profile,
)
from .plots import save_line_chart
from .postprocess import postprocess
from .tensor import NumericsError, ShapeError, Tensor, no_grad
from .trainer import REFERENCE_LATENCY_MS, TrainConfig, bench, evaluate, train

EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_NUMERIC = 4
EXIT_CHECKPOINT = 5
EXIT_DECODE = 6

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = set(TrainConfig().to_dict())
_RUN_KEYS = {"data", "out"}

_BOX_COLORS = [
    (220, 40, 40), (40, 190, 60), (50, 80, 230), (230, 200, 40),
    (200, 60, 200), (40, 200, 200), (240, 140, 40), (150, 150, 150),
]


def _coerce_model_value(name: str, raw):
    default = getattr(ModelConfig, name)
    if isinstance(default, tuple):
        if isinstance(raw, (tuple, list)):
            return tuple(int(v) for v in raw)
        return tuple(int(v) for v in str(raw).replace(",", " ").split())
    if isinstance(default, bool):
        return raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def resolve_run_config(config_path, overrides: dict):
    """Merge defaults < config file < flags into (ModelConfig, TrainConfig, run)."""
    merged = {}
    if config_path:
        try:
            merged.update(parse_kv_file(config_path))
        except DatasetError as exc:
            raise ConfigError(str(exc)) from None
    merged.update({k: v for k, v in overrides.items() if v is not None})

    unknown = set(merged) - _MODEL_KEYS - _TRAIN_KEYS - _RUN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        model_cfg = ModelConfig.from_dict(
            {k: _coerce_model_value(k, v) for k, v in merged.items() if k in _MODEL_KEYS})
        train_cfg = TrainConfig.from_dict(
            {k: v for k, v in merged.items() if k in _TRAIN_KEYS})
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    run = {k: merged[k] for k in _RUN_KEYS if k in merged}
    return model_cfg, train_cfg, run


def echo_config(path, model_cfg: ModelConfig, train_cfg: TrainConfig, run: dict) -> None:
    lines = []
    items = {**model_cfg.to_dict(), **train_cfg.to_dict(), **run}
    for key in sorted(items):
        value = items[key]
        if isinstance(value, (list, tuple)):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def _class_names(data_path):
    if not data_path:
        return None
    kv = parse_kv_file(data_path)
    if "names" not in kv:
        return None
    return [n.strip() for n in kv["names"].split(",")]


def _name_of(names, cls: int) -> str:
    if names and 0 <= cls < len(names):
        return names[cls]
    return f"class_{cls}"


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    overrides = {
        "data": args.data, "out": args.out, "seed": args.seed,
        "epochs": args.epochs, "batch_size": args.batch_size,
        "lr0": args.lr0, "lrf": args.lrf, "input_size": args.input_size,
        "width_mult": args.width_mult, "num_classes": args.num_classes,
        "val_interval": args.val_interval, "patience": args.patience,
        "warmup_iters": args.warmup_iters, "augment": args.augment,
    }
    model_cfg, train_cfg, run = resolve_run_config(args.config, overrides)
    if "data" not in run:
        raise ConfigError("no dataset manifest: pass --data or set 'data =' in the config file")
    out_dir = Path(run.get("out", "runs/train"))
    out_dir.mkdir(parents=True, exist_ok=True)
    run.setdefault("out", str(out_dir))
    echo_config(out_dir / "config.echo", model_cfg, train_cfg, run)

    manifest = load_dataset(run["data"])
    if manifest.num_classes != model_cfg.num_classes:
        raise ConfigError(
            f"manifest declares {manifest.num_classes} classes but the model "
            f"is configured for {model_cfg.num_classes}")
    model = build(model_cfg, seed=train_cfg.seed)
    model, log = train(model, manifest, train_cfg, run_dir=out_dir,
                       verbose=not args.quiet)
    epochs = [r[0] for r in log.metrics]
    maps = [r[2] for r in log.metrics]
    save_line_chart(out_dir / "map_curve.svg", epochs, maps,
                    title="validation mAP50-95", xlabel="epoch", ylabel="mAP50-95")
    print(f"finished {len(log.losses)} iterations; artifacts in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    model, meta, _ = load_checkpoint(args.weights)
    manifest = load_dataset(args.data)
    report = evaluate(model, manifest, args.split, conf_threshold=args.conf,
                      iou_threshold=args.iou, input_size=args.size)
    print(report.table())
    print(f"hardware: {report.hardware}")
    out = Path(args.out) if args.out else Path(args.weights).parent
    out.mkdir(parents=True, exist_ok=True)
    report.save_csv(out / "report.csv")
    report.save_confusion_csv(out / "confusion_matrix.csv")
    print(f"wrote {out / 'report.csv'} and {out / 'confusion_matrix.csv'}")
    return 0


def cmd_infer(args) -> int:
    model, meta, _ = load_checkpoint(args.weights)
    names = _class_names(args.data)
    src = Path(args.input)
    if src.is_dir():
        paths = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not paths:
            raise DecodeError(f"no decodable images under {src}")
    elif src.is_file():
        paths = [src]
    else:
        raise DecodeError(f"no such input: {src}")

    size = args.size if args.size else model.config.input_size
    out = Path(args.out)
    if args.save_txt or args.save_img:
        out.mkdir(parents=True, exist_ok=True)
    model.eval()
    for path in paths:
        pixels = load_image(path)
        canvas, tf = letterbox(pixels, size)
        with no_grad():
            outputs = model(Tensor(canvas[None]))
        dets = postprocess(outputs, model.config.strides, args.conf, args.iou,
                           input_size=size)[0]
        h, w = pixels.shape[1], pixels.shape[2]
        corners = tf.corners_to_source_px(dets[:, :4]) if dets.shape[0] else dets[:, :4]
        corners = np.clip(corners, 0, [w, h, w, h]) if dets.shape[0] else corners
        print(f"{path.name}: {dets.shape[0]} detections")
        txt_lines = []
        for (x1, y1, x2, y2), det in zip(corners, dets):
            score, cls = float(det[4]), int(det[5])
            print(f"  {_name_of(names, cls)} {score:.3f} "
                  f"({x1:.1f}, {y1:.1f}, {x2:.1f}, {y2:.1f})")
            bw, bh = (x2 - x1) / w, (y2 - y1) / h
            if bw > 0 and bh > 0:
                txt_lines.append(f"{cls} {(x1 + x2) / 2 / w:.6f} {(y1 + y2) / 2 / h:.6f} "
                                 f"{bw:.6f} {bh:.6f}")
        if args.save_txt:
            (out / f"{path.stem}.txt").write_text("".join(l + "\n" for l in txt_lines))
        if args.save_img:
            img = Image.fromarray(
                np.clip(pixels * 255, 0, 255).astype(np.uint8).transpose(1, 2, 0), "RGB")
            draw = ImageDraw.Draw(img)
            for (x1, y1, x2, y2), det in zip(corners, dets):
                cls = int(det[5])
                color = _BOX_COLORS[cls % len(_BOX_COLORS)]
                draw.rectangle([x1, y1, x2, y2], outline=color, width=2)
                draw.text((x1 + 2, max(0, y1 - 12)),
                          f"{_name_of(names, cls)} {det[4]:.2f}", fill=color)
            img.save(out / f"{path.stem}.png")
    return 0


def cmd_bench(args) -> int:
    if args.weights:
        model, _, _ = load_checkpoint(args.weights)
    else:
        model_cfg, _, _ = resolve_run_config(args.config, {})
        model = build(model_cfg, seed=0)
    stats = bench(model, args.size, iterations=args.iterations, warmup=args.warmup)
    size = args.size if args.size else model.config.input_size
    print(f"bench: input {size}, {stats['n']} timed runs after {args.warmup} warmup")
    print(f"hardware: {stats['hardware']}")
    print(f"mean {stats['mean']:.2f} ms | p50 {stats['p50']:.2f} ms | p95 {stats['p95']:.2f} ms")
    print(f"reference: {REFERENCE_LATENCY_MS} ms single-image on an RTX 2070 Mobile GPU "
          f"(context only, not a target)")
    return 0


def cmd_inspect(args) -> int:
    if args.weights:
        model, _, _ = load_checkpoint(args.weights)
    else:
        model_cfg, _, _ = resolve_run_config(args.config, {})
        model = build(model_cfg, seed=0)
    size = args.size if args.size else model.config.input_size
    rows = profile(model, size)
    total_params = model.param_count()
    total_flops = sum(r["flops"] for r in rows)
    summary = (f"Size {size} | Param(M) {total_params / 1e6:.3f} | "
               f"FLOPs(B) {total_flops / 1e9:.2f}")
    if args.summary:
        print(summary)
        return 0
    print(f"{'name':<12} {'type':<18} {'out_shape':<18} {'params':>10} {'flops':>14}")
    print("-" * 76)
    for r in rows:
        shape = "x".join(str(v) for v in r["out_shape"])
        print(f"{r['name']:<12} {r['type']:<18} {shape:<18} {r['params']:>10} {r['flops']:>14}")
    print("-" * 76)
    print(f"{'total':<12} {'':<18} {'':<18} {total_params:>10} {total_flops:>14}")
    print(summary)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="roomdet",
                                description="indoor object detector toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a detector")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--data", help="dataset manifest path")
    t.add_argument("--out", help="run directory (default runs/train)")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--lrf", type=float)
    t.add_argument("--input-size", dest="input_size", type=int)
    t.add_argument("--width-mult", dest="width_mult", type=float)
    t.add_argument("--num-classes", dest="num_classes", type=int)
    t.add_argument("--val-interval", dest="val_interval", type=int)
    t.add_argument("--patience", type=int)
    t.add_argument("--warmup-iters", dest="warmup_iters", type=int)
    t.add_argument("--augment", action=argparse.BooleanOptionalAction, default=None)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--weights", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="val")
    e.add_argument("--conf", type=float, default=0.001)
    e.add_argument("--iou", type=float, default=0.45)
    e.add_argument("--size", type=int)
    e.add_argument("--out", help="directory for report.csv (default: weights dir)")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="run detection on an image or directory")
    i.add_argument("--weights", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--conf", type=float, default=0.25)
    i.add_argument("--iou", type=float, default=0.45)
    i.add_argument("--size", type=int)
    i.add_argument("--data", help="manifest supplying class names")
    i.add_argument("--out", default="runs/infer")
    i.add_argument("--save-txt", dest="save_txt", action="store_true")
    i.add_argument("--save-img", dest="save_img", action="store_true")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="single-image latency harness")
    b.add_argument("--weights")
    b.add_argument("--config")
    b.add_argument("--size", type=int)
    b.add_argument("--iterations", type=int, default=100)
    b.add_argument("--warmup", type=int, default=10)
    b.set_defaults(func=cmd_bench)

    n = sub.add_parser("inspect", help="per-layer parameter and FLOP table")
    n.add_argument("--weights")
    n.add_argument("--config")
    n.add_argument("--size", type=int)
    n.add_argument("--summary", action="store_true")
    n.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CheckpointError as exc:
        print(f"error: checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DecodeError as exc:
        print(f"error: decode: {exc}", file=sys.stderr)
        return EXIT_DECODE
    except DatasetError as exc:
        print(f"error: dataset: {exc}", file=sys.stderr)
        return EXIT_DATASET
    except NumericsError as exc:
        print(f"error: numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ShapeError, ValueError) as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
