"""Deterministic SGD training loop, evaluation driver, and latency bench."""

import csv
import platform
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .data import DatasetError, DatasetManifest, batch_iterator, batches_per_epoch
from .losses import FocalParams, LossWeights, total_loss
from .metrics import EvalReport, confusion_matrix, mean_ap, precision_recall
from .model import Detector, count_flops, save_checkpoint
from .postprocess import postprocess
from .tensor import SGD, TAPE, NumericsError, Tensor, backward, no_grad

# Published single-image reference on an RTX 2070 Mobile GPU for a model of
# this size class.  Reported alongside bench output for context only; it is
# never a pass/fail bound (this implementation targets CPU).
REFERENCE_LATENCY_MS = 12.2


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 16
    lr0: float = 0.01
    lrf: float = 0.01
    momentum: float = 0.937
    weight_decay: float = 5e-4
    warmup_iters: int = -1   # -1 resolves to three epochs' worth of iterations
    seed: int = 0
    val_interval: int = 1
    patience: int = 0        # 0 disables early stopping
    min_delta: float = 1e-4
    augment: bool = True
    mosaic_prob: float = 1.0
    flip_prob: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if not 0 < self.lrf <= 1:
            raise ValueError("lrf must be in (0, 1]")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.val_interval < 1:
            raise ValueError("val_interval must be >= 1")
        if not 0.0 <= self.mosaic_prob <= 1.0:
            raise ValueError("mosaic_prob must be in [0, 1]")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must be in [0, 1]")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        if self.warmup_iters < -1:
            raise ValueError("warmup_iters must be -1 (auto) or >= 0")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "weights":
                out["loss_cls"] = self.weights.cls
                out["loss_dfl"] = self.weights.dfl
                out["loss_ciou"] = self.weights.ciou
            elif f.name == "focal":
                out["focal_alpha"] = self.focal.alpha
                out["focal_gamma"] = self.focal.gamma
            else:
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        weights = LossWeights(
            cls=float(d.pop("loss_cls", LossWeights.cls)),
            dfl=float(d.pop("loss_dfl", LossWeights.dfl)),
            ciou=float(d.pop("loss_ciou", LossWeights.ciou)),
        )
        focal = FocalParams(
            alpha=float(d.pop("focal_alpha", FocalParams.alpha)),
            gamma=float(d.pop("focal_gamma", FocalParams.gamma)),
        )
        known = {f.name: f.type for f in fields(cls) if f.name not in ("weights", "focal")}
        kwargs = {}
        for key, value in d.items():
            if key not in known:
                raise ValueError(f"unknown training option '{key}'")
            current = getattr(cls, key)
            if isinstance(current, bool):
                kwargs[key] = value if isinstance(value, bool) else str(value).lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = float(value)
        cfg = cls(weights=weights, focal=focal, **kwargs)
        cfg.validate()
        return cfg


def lr_at(epoch: float, config: TrainConfig, iteration=None, warmup_iters: int = 0) -> float:
    """Linear-decay schedule lr0*((1 - e/E)(1 - lrf) + lrf) with an optional
    iteration-granular linear warmup from zero."""
    e = min(max(float(epoch), 0.0), float(config.epochs))
    lr = config.lr0 * ((1.0 - e / config.epochs) * (1.0 - config.lrf) + config.lrf)
    if iteration is not None and warmup_iters > 0 and iteration < warmup_iters:
        lr *= iteration / warmup_iters
    return lr


LOSS_COLUMNS = ("iteration", "epoch", "lr", "total", "cls", "dfl", "ciou", "num_pos")
METRIC_COLUMNS = ("epoch", "map50", "map50_95", "precision", "recall", "elapsed_s")


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)     # rows matching LOSS_COLUMNS
    metrics: list = field(default_factory=list)    # rows matching METRIC_COLUMNS
    lr_trace: list = field(default_factory=list)
    iter_seconds: list = field(default_factory=list)

    @staticmethod
    def _fmt(v):
        if isinstance(v, float):
            return format(v, ".10g")
        return str(v)

    def save_losses_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOSS_COLUMNS)
            for row in self.losses:
                w.writerow([self._fmt(v) for v in row])

    def save_metrics_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(METRIC_COLUMNS)
            for row in self.metrics:
                w.writerow([self._fmt(v) for v in row])


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine() or "unknown-cpu"
    return (f"{cpu} | {platform.system()} {platform.release()} | "
            f"Python {platform.python_version()} | single-thread CPU")


def _fill_missing_grads(params) -> None:
    # a batch with no positive anchors gives the regression branch no data
    # gradient; weight decay must still apply, so substitute zeros
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def train(model: Detector, manifest: DatasetManifest, config: TrainConfig,
          run_dir=None, input_size=None, verbose: bool = True):
    """Run the full loop; returns (model, TrainLog).

    Per iteration: batch -> forward -> total_loss -> backward -> SGD step at
    the scheduled rate.  Per validation interval: evaluate the val split
    (falling back to train when absent), log metrics, write last.ckpt and
    refresh best.ckpt on mAP50-95 improvement.  A non-finite loss aborts with
    a diagnostic carrying the batch id and component values.
    """
    config.validate()
    if run_dir is not None:
        run_dir = Path(run_dir)
    if input_size is None:
        input_size = model.config.input_size
    nc = model.config.num_classes
    val_split = "val" if manifest.splits.get("val") else "train"
    ipe = batches_per_epoch(manifest, "train", config.batch_size)
    if ipe == 0:
        raise DatasetError("train split is empty")
    warmup = config.warmup_iters if config.warmup_iters >= 0 else 3 * ipe

    params = [p for _, p in model.named_parameters()]
    opt = SGD(params, config.lr0, config.momentum, config.weight_decay)
    log = TrainLog()
    best = float("-inf")
    since_best = 0
    iteration = 0
    t_start = time.perf_counter()

    def save(path, tag):
        meta = {"epoch": tag["epoch"], "iteration": tag["iteration"],
                "map50": tag.get("map50"), "map50_95": tag.get("map50_95")}
        save_checkpoint(model, path, meta=meta,
                        optimizer_state=[v.copy() for v in opt.velocities])

    last_tag = {"epoch": 0, "iteration": 0}
    for epoch in range(config.epochs):
        model.train()
        stream = batch_iterator(manifest, "train", config.batch_size,
                                config.augment, config.seed, epoch, input_size,
                                config.mosaic_prob, config.flip_prob)
        for bi, (images, targets) in enumerate(stream):
            t0 = time.perf_counter()
            TAPE.clear()
            opt.zero_grad()
            outputs = model(images)
            loss, comps = total_loss(outputs, targets, nc, model.config.reg_bins,
                                     model.config.strides, config.weights, config.focal)
            wcls = config.weights.cls * comps["cls"]
            wdfl = config.weights.dfl * comps["dfl"]
            wciou = config.weights.ciou * comps["ciou"]
            total_f = float(loss.data)
            if not np.isfinite([total_f, wcls, wdfl, wciou]).all():
                raise NumericsError(
                    f"non-finite loss at iteration {iteration} (epoch {epoch}, batch {bi}): "
                    f"total={total_f} cls={wcls} dfl={wdfl} ciou={wciou}")
            backward(loss)
            _fill_missing_grads(params)
            lr = lr_at(epoch + bi / ipe, config, iteration=iteration, warmup_iters=warmup)
            opt.step(lr)
            log.losses.append((iteration, epoch, lr, total_f, wcls, wdfl, wciou,
                               comps["num_pos"]))
            log.lr_trace.append(lr)
            log.iter_seconds.append(time.perf_counter() - t0)
            iteration += 1
        # completed-epoch count, matching the iteration counter
        last_tag = {"epoch": epoch + 1, "iteration": iteration}

        if (epoch + 1) % config.val_interval == 0 or epoch + 1 == config.epochs:
            report = evaluate(model, manifest, val_split, conf_threshold=0.001,
                              input_size=input_size)
            elapsed = time.perf_counter() - t_start
            log.metrics.append((epoch, report.map50, report.map50_95,
                                report.precision, report.recall, elapsed))
            last_tag.update(map50=report.map50, map50_95=report.map50_95)
            if verbose:
                mean_loss = float(np.mean([r[3] for r in log.losses[-ipe:]]))
                print(f"epoch {epoch + 1}/{config.epochs}  loss {mean_loss:.4f}  "
                      f"mAP50 {report.map50:.4f}  mAP50-95 {report.map50_95:.4f}  "
                      f"lr {log.lr_trace[-1]:.5f}")
            if run_dir is not None:
                run_dir.mkdir(parents=True, exist_ok=True)
                save(run_dir / "last.ckpt", last_tag)
                log.save_losses_csv(run_dir / "losses.csv")
                log.save_metrics_csv(run_dir / "metrics.csv")
            if report.map50_95 > best + config.min_delta:
                best = report.map50_95
                since_best = 0
                if run_dir is not None:
                    save(run_dir / "best.ckpt", last_tag)
            else:
                since_best += 1
                if config.patience > 0 and since_best >= config.patience:
                    if verbose:
                        print(f"early stop at epoch {epoch + 1} (no improvement "
                              f"for {since_best} validations)")
                    break

    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        save(run_dir / "last.ckpt", last_tag)
        if not (run_dir / "best.ckpt").exists():
            save(run_dir / "best.ckpt", last_tag)
        log.save_losses_csv(run_dir / "losses.csv")
        log.save_metrics_csv(run_dir / "metrics.csv")
    return model, log


def evaluate(model: Detector, manifest: DatasetManifest, split: str,
             conf_threshold: float = 0.001, iou_threshold: float = 0.45,
             input_size=None, max_det: int = 300, detect_fn=None) -> EvalReport:
    """Inference + postprocess + metrics over one split.

    Images run one at a time so the recorded per-image latency doubles as a
    bench over real data.  ``detect_fn`` swaps the model forward for a
    callable (images) -> [(N,6) arrays]; used by tests.
    """
    if split not in manifest.splits or not manifest.splits[split]:
        raise DatasetError(f"split '{split}' missing or empty")
    if input_size is None:
        input_size = model.config.input_size
    model.eval()
    nc = manifest.num_classes
    det_rows, gt_rows, times_ms = [], [], []
    img_id = 0
    with no_grad():
        for images, targets in batch_iterator(manifest, split, 1, False, 0,
                                              epoch=0, input_size=input_size):
            t0 = time.perf_counter()
            if detect_fn is not None:
                dets = detect_fn(images)[0]
            else:
                outputs = model(images)
                dets = postprocess(outputs, model.config.strides, conf_threshold,
                                   iou_threshold, max_det, input_size)[0]
            times_ms.append((time.perf_counter() - t0) * 1000.0)
            for x1, y1, x2, y2, score, cls in dets:
                det_rows.append([img_id, cls, score, x1, y1, x2, y2])
            cls_ids, boxes = targets[0]
            for c, (cx, cy, w, h) in zip(cls_ids, boxes):
                gt_rows.append([img_id, c, cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2])
            img_id += 1

    dets = np.asarray(det_rows, dtype=np.float64).reshape(-1, 7)
    gts = np.asarray(gt_rows, dtype=np.float64).reshape(-1, 6)
    map50, map50_95, table = mean_ap(dets, gts, nc)
    precision, recall, _ = precision_recall(dets, gts, 0.5)
    cm = confusion_matrix(dets, gts, nc)
    arr = np.asarray(times_ms)
    latency = {"mean": float(arr.mean()), "p50": float(np.percentile(arr, 50)),
               "p95": float(np.percentile(arr, 95)), "n": int(arr.size)}
    return EvalReport(
        input_size=input_size,
        params=model.param_count(),
        flops=count_flops(model, input_size),
        precision=precision,
        recall=recall,
        map50=map50,
        map50_95=map50_95,
        latency_ms=latency,
        ap_per_class=table,
        confusion=cm,
        class_names=list(manifest.names),
        hardware=hardware_descriptor(),
    )


def bench(model: Detector, input_size=None, iterations: int = 100,
          warmup: int = 10, seed: int = 0) -> dict:
    """Single-image forward + postprocess latency after a warmup.

    Returns mean/p50/p95 in ms over exactly ``iterations`` timed runs, plus
    the hardware descriptor and the informational GPU reference figure.
    """
    if input_size is None:
        input_size = model.config.input_size
    model.eval()
    rng = np.random.default_rng(seed)
    img = Tensor(rng.uniform(0.0, 1.0, (1, 3, input_size, input_size)).astype(np.float32))
    times = []
    with no_grad():
        for _ in range(warmup):
            postprocess(model(img), model.config.strides, input_size=input_size)
        for _ in range(iterations):
            t0 = time.perf_counter()
            postprocess(model(img), model.config.strides, input_size=input_size)
            times.append((time.perf_counter() - t0) * 1000.0)
    arr = np.asarray(times)
    return {
        "mean": float(arr.mean()),
        "p50": float(np.percentile(arr, 50)),
        "p95": float(np.percentile(arr, 95)),
        "n": int(arr.size),
        "hardware": hardware_descriptor(),
        "reference_ms": REFERENCE_LATENCY_MS,
    }
