"""Detector assembly, parameter/FLOP accounting, and checkpoint I/O.

The graph is a Focus stem, alternating stride-2 ConvBNAct / CSP stages down
to stride 32, an SPP+transformer block on the deepest map, a PAN neck
(top-down then bottom-up), and a decoupled anchor-free head emitting strides
8/16/32.

Checkpoints are a single container file: a fixed magic/version prefix, a JSON
header carrying the config and a parameter manifest (names, shapes, byte
offsets, payload checksum), then the raw little-endian float32 payload.
"""

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .blocks import (
    ConvBNAct,
    CSPLayer,
    DetectHead,
    Focus,
    Module,
    SPPTransformer,
    conv_flops,
)
from .tensor import ShapeError, Tensor

CHECKPOINT_MAGIC = b"RMDT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class ConfigError(ValueError):
    """Raised for invalid or unknown configuration values."""


@dataclass
class ModelConfig:
    num_classes: int = 32
    input_size: int = 640
    width_mult: float = 0.25
    depth_mult: float = 0.33
    stage_channels: tuple = (64, 128, 256, 512, 1024)
    stage_depths: tuple = (3, 6, 9, 3)
    reg_bins: int = 16
    num_heads: int = 4
    mlp_ratio: float = 2.0
    stem_kernel: int = 1
    head_width: int = 160
    head_stacks: tuple = (1, 2, 2)
    strides: tuple = (8, 16, 32)

    def validate(self) -> "ModelConfig":
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_size % 32 or self.input_size < 32:
            raise ConfigError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        if not (0 < self.width_mult <= 2) or not (0 < self.depth_mult <= 2):
            raise ConfigError("width_mult/depth_mult must lie in (0, 2]")
        if len(self.stage_channels) != 5 or len(self.stage_depths) != 4:
            raise ConfigError("expected 5 stage channel entries and 4 stage depths")
        if self.reg_bins < 2:
            raise ConfigError(f"reg_bins must be >= 2, got {self.reg_bins}")
        if self.stem_kernel not in (1, 3):
            raise ConfigError(f"stem_kernel must be 1 or 3, got {self.stem_kernel}")
        if tuple(self.strides) != (8, 16, 32):
            raise ConfigError("the head is wired for strides (8, 16, 32)")
        ch = self.channels()
        if ch[-1] % self.num_heads:
            raise ConfigError(
                f"deepest width {ch[-1]} not divisible by num_heads={self.num_heads}"
            )
        return self

    def channels(self) -> tuple:
        return tuple(max(2, 2 * int(round(c * self.width_mult / 2))) for c in self.stage_channels)

    def depths(self) -> tuple:
        return tuple(max(1, math.ceil(d * self.depth_mult)) for d in self.stage_depths)

    def head_hidden(self) -> int:
        return max(8, 2 * int(round(self.head_width * self.width_mult / 2)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k in ("stage_channels", "stage_depths", "head_stacks", "strides"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        kwargs = dict(d)
        for k in ("stage_channels", "stage_depths", "head_stacks", "strides"):
            if k in kwargs:
                kwargs[k] = tuple(kwargs[k])
        return cls(**kwargs).validate()


def _use_focus(map_size: int) -> bool:
    # The space-to-depth bottleneck needs an even extent above 2; the choice
    # is fixed at build time from the configured input size.
    return map_size % 2 == 0 and map_size > 2


class Detector(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        c1, c2, c3, c4, c5 = config.channels()
        n1, n2, n3, n4 = config.depths()
        nn = max(1, math.ceil(3 * config.depth_mult))
        s = config.input_size

        self.stem = Focus(3, c1, k=config.stem_kernel, rng=rng)
        self.down1 = ConvBNAct(c1, c2, k=3, stride=2, rng=rng)
        self.stage1 = CSPLayer(c2, c2, n=n1, use_focus=_use_focus(s // 4), rng=rng)
        self.down2 = ConvBNAct(c2, c3, k=3, stride=2, rng=rng)
        self.stage2 = CSPLayer(c3, c3, n=n2, use_focus=_use_focus(s // 8), rng=rng)
        self.down3 = ConvBNAct(c3, c4, k=3, stride=2, rng=rng)
        self.stage3 = CSPLayer(c4, c4, n=n3, use_focus=_use_focus(s // 16), rng=rng)
        self.down4 = ConvBNAct(c4, c5, k=3, stride=2, rng=rng)
        self.stage4 = CSPLayer(c5, c5, n=n4, use_focus=_use_focus(s // 32), rng=rng)
        self.sppt = SPPTransformer(c5, heads=config.num_heads, mlp_ratio=config.mlp_ratio, rng=rng)

        self.lat1 = CSPLayer(c5 + c4, c4, n=nn, shortcut=False, use_focus=_use_focus(s // 16), rng=rng)
        self.lat2 = CSPLayer(c4 + c3, c3, n=nn, shortcut=False, use_focus=_use_focus(s // 8), rng=rng)
        self.down_n1 = ConvBNAct(c3, c3, k=3, stride=2, rng=rng)
        self.pan1 = CSPLayer(c3 + c4, c4, n=nn, shortcut=False, use_focus=_use_focus(s // 16), rng=rng)
        self.down_n2 = ConvBNAct(c4, c4, k=3, stride=2, rng=rng)
        self.pan2 = CSPLayer(c4 + c5, c5, n=nn, shortcut=False, use_focus=_use_focus(s // 32), rng=rng)

        hidden = config.head_hidden()
        self.head = DetectHead(
            (c3, c4, c5),
            config.num_classes,
            reg_bins=config.reg_bins,
            hidden=(hidden, hidden, hidden),
            stacks=config.head_stacks,
            rng=rng,
        )

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"detector expects (B,3,H,W) input, got {x.shape}")
        if x.shape[2] % 32 or x.shape[3] % 32 or x.shape[2] < 32 or x.shape[3] < 32:
            raise ShapeError(f"input extent must be a positive multiple of 32, got {x.shape}")
        x = self.stem(x)
        x = self.stage1(self.down1(x))
        p3 = self.stage2(self.down2(x))
        p4 = self.stage3(self.down3(p3))
        p5 = self.sppt(self.stage4(self.down4(p4)))
        t = self.lat1(T.concat([T.upsample_nearest2x(p5), p4], axis=1))
        o3 = self.lat2(T.concat([T.upsample_nearest2x(t), p3], axis=1))
        o4 = self.pan1(T.concat([self.down_n1(o3), t], axis=1))
        o5 = self.pan2(T.concat([self.down_n2(o4), p5], axis=1))
        return self.head([o3, o4, o5])


def build(config: ModelConfig, seed: int = 0) -> Detector:
    rng = np.random.default_rng(seed)
    return Detector(config, rng)


def count_params(model: Module) -> int:
    return model.param_count()


def profile(model: Detector, input_size=None) -> list:
    """Per-layer parameter and FLOP table at the given input extent."""
    cfg = model.config
    size = cfg.input_size if input_size is None else input_size
    if size % 32 or size < 32:
        raise ShapeError(f"profile extent must be a positive multiple of 32, got {size}")
    c1, c2, c3, c4, c5 = cfg.channels()
    rows = []

    def row(name, module, flops, out_c, out_hw):
        rows.append(
            {
                "name": name,
                "type": type(module).__name__ if module is not None else "-",
                "params": module.param_count() if module is not None else 0,
                "flops": int(flops),
                "out_shape": (out_c, out_hw[0], out_hw[1]),
            }
        )

    h = w = size
    f, hw = model.stem.flops(h, w)
    row("stem", model.stem, f, c1, hw)
    graph = [
        ("down1", model.down1, c2),
        ("stage1", model.stage1, c2),
        ("down2", model.down2, c3),
        ("stage2", model.stage2, c3),
        ("down3", model.down3, c4),
        ("stage3", model.stage3, c4),
        ("down4", model.down4, c5),
        ("stage4", model.stage4, c5),
        ("sppt", model.sppt, c5),
    ]
    for name, mod, cout in graph:
        f, hw = mod.flops(*hw)
        row(name, mod, f, cout, hw)
    s8 = (size // 8, size // 8)
    s16 = (size // 16, size // 16)
    s32 = (size // 32, size // 32)
    f, _ = model.lat1.flops(*s16)
    row("lat1", model.lat1, f, c4, s16)
    f, _ = model.lat2.flops(*s8)
    row("lat2", model.lat2, f, c3, s8)
    f, _ = model.down_n1.flops(*s8)
    row("down_n1", model.down_n1, f, c3, s16)
    f, _ = model.pan1.flops(*s16)
    row("pan1", model.pan1, f, c4, s16)
    f, _ = model.down_n2.flops(*s16)
    row("down_n2", model.down_n2, f, c4, s32)
    f, _ = model.pan2.flops(*s32)
    row("pan2", model.pan2, f, c5, s32)
    f = model.head.flops([s8, s16, s32])
    row("head", model.head, f, cfg.num_classes + 4 * cfg.reg_bins, s8)
    return rows


def count_flops(model: Detector, input_size=None) -> int:
    return sum(r["flops"] for r in profile(model, input_size))


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

def _state_entries(model: Detector):
    for name, p in model.named_parameters():
        yield name, p.data, "param"
    for name, b in model.named_buffers():
        yield name, b, "buffer"


def save_checkpoint(model: Detector, path, meta=None, optimizer_state=None) -> None:
    """Write the model (and optional optimizer velocities) to one file."""
    entries = list(_state_entries(model))
    if optimizer_state is not None:
        for i, v in enumerate(optimizer_state):
            entries.append((f"optim.{i}", v, "optim"))
    manifest = []
    chunks = []
    offset = 0
    for name, arr, kind in entries:
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw), "kind": kind}
        )
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "config": model.config.to_dict(),
        "tensors": manifest,
        "meta": meta or {},
        "payload_bytes": len(payload),
        "payload_crc32": zlib.crc32(payload) & 0xFFFFFFFF,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(np.uint32(CHECKPOINT_VERSION).tobytes())
        f.write(np.uint64(len(hbytes)).tobytes())
        f.write(hbytes)
        f.write(payload)


def read_header(path) -> dict:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointIntegrityError(f"{path}: not a checkpoint (bad magic)")
        version = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
            )
        hlen_raw = f.read(8)
        if len(hlen_raw) != 8:
            raise CheckpointIntegrityError(f"{path}: truncated header length")
        hlen = int(np.frombuffer(hlen_raw, dtype="<u8")[0])
        hbytes = f.read(hlen)
        if len(hbytes) != hlen:
            raise CheckpointIntegrityError(f"{path}: truncated header")
        try:
            return json.loads(hbytes.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointIntegrityError(f"{path}: corrupt header ({e})") from e


def load_checkpoint(path, config: ModelConfig = None, seed: int = 0):
    """Rebuild a model from a checkpoint.

    Returns (model, meta, optimizer_state).  If ``config`` is given it must
    match the embedded one exactly, otherwise a config-mismatch error is
    raised; the embedded config always drives the rebuild.
    """
    header = read_header(path)
    embedded = ModelConfig.from_dict(header["config"])
    if config is not None and config.to_dict() != embedded.to_dict():
        raise CheckpointConfigError(
            f"{path}: checkpoint config does not match the requested one "
            f"(e.g. num_classes {embedded.num_classes} vs {config.num_classes})"
        )
    with open(path, "rb") as f:
        f.seek(8)
        hlen = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        f.seek(16 + hlen)
        payload = f.read()
    if len(payload) != header["payload_bytes"]:
        raise CheckpointIntegrityError(
            f"{path}: payload is {len(payload)} bytes, header promises {header['payload_bytes']}"
        )
    if (zlib.crc32(payload) & 0xFFFFFFFF) != header["payload_crc32"]:
        raise CheckpointIntegrityError(f"{path}: payload checksum mismatch")

    model = build(embedded, seed=seed)
    arrays = {}
    for entry in header["tensors"]:
        start, n = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[start : start + n], dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = (arr, entry["kind"])
    _load_state(model, arrays, path)
    optim = [arrays[e["name"]][0].copy() for e in header["tensors"] if e["kind"] == "optim"]
    return model, header.get("meta", {}), optim


def _load_state(model: Detector, arrays: dict, path) -> None:
    for name, p in model.named_parameters():
        if name not in arrays:
            raise CheckpointIntegrityError(f"{path}: missing parameter {name}")
        arr, _ = arrays[name]
        if tuple(arr.shape) != tuple(p.shape):
            raise CheckpointShapeError(
                f"{path}: parameter {name} has shape {arr.shape}, model expects {p.shape}"
            )
        p.data = arr.astype(p.data.dtype)
        p.grad = None
    for name, b in model.named_buffers():
        if name not in arrays:
            raise CheckpointIntegrityError(f"{path}: missing buffer {name}")
        arr, _ = arrays[name]
        if tuple(arr.shape) != tuple(b.shape):
            raise CheckpointShapeError(
                f"{path}: buffer {name} has shape {arr.shape}, model expects {b.shape}"
            )
        b[...] = arr.astype(b.dtype)
