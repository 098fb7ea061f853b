"""Detector assembly, accounting, and the checkpoint container."""

import json
import struct

import numpy as np
import pytest
from numpy.testing import assert_allclose

from roomdet.model import (
    CHECKPOINT_MAGIC,
    CheckpointConfigError,
    CheckpointIntegrityError,
    CheckpointShapeError,
    CheckpointVersionError,
    ConfigError,
    ModelConfig,
    build,
    count_flops,
    count_params,
    load_checkpoint,
    profile,
    read_header,
    save_checkpoint,
)
from roomdet.tensor import ShapeError, Tensor

TINY = ModelConfig(num_classes=2, input_size=64, width_mult=0.0625)


def tiny_model(seed=0):
    return build(TINY, seed=seed)


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_default_config_is_valid():
    cfg = ModelConfig().validate()
    assert cfg.channels() == (16, 32, 64, 128, 256)
    assert cfg.depths() == (1, 2, 3, 1)
    assert cfg.head_hidden() == 40


@pytest.mark.parametrize("kwargs", [
    {"num_classes": 0},
    {"input_size": 100},
    {"input_size": 0},
    {"width_mult": 0.0},
    {"reg_bins": 1},
    {"stem_kernel": 5},
    {"strides": (4, 8, 16)},
    {"stage_channels": (64, 128, 256)},
])
def test_config_validation_rejects(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs).validate()


def test_config_dict_roundtrip():
    cfg = ModelConfig(num_classes=7, width_mult=0.5)
    again = ModelConfig.from_dict(cfg.to_dict())
    assert again == cfg
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({"num_classes": 2, "bogus": 1})


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------

def test_forward_output_shapes():
    m = tiny_model()
    x = Tensor(np.zeros((2, 3, 64, 64), dtype=np.float32))
    outs = m(x)
    assert len(outs) == 3
    sizes = [(64 // s) for s in TINY.strides]
    for (cls, reg), s in zip(outs, sizes):
        assert cls.shape == (2, TINY.num_classes, s, s)
        assert reg.shape == (2, 4 * TINY.reg_bins, s, s)


def test_forward_rejects_bad_inputs():
    m = tiny_model()
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 1, 64, 64), dtype=np.float32)))
    with pytest.raises(ShapeError):
        m(Tensor(np.zeros((1, 3, 60, 64), dtype=np.float32)))


def test_build_is_seed_deterministic():
    a, b = tiny_model(3), tiny_model(3)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        assert_allclose(pa.data, pb.data)
    c = tiny_model(4)
    diffs = sum(
        not np.array_equal(pa.data, pc.data)
        for (_, pa), (_, pc) in zip(a.named_parameters(), c.named_parameters()))
    assert diffs > 0


# ---------------------------------------------------------------------------
# accounting
# ---------------------------------------------------------------------------

def test_profile_params_sum_to_total():
    m = tiny_model()
    rows = profile(m)
    assert sum(r["params"] for r in rows) == count_params(m)
    assert all(r["flops"] >= 0 for r in rows)
    assert {"stem", "sppt", "head"} <= {r["name"] for r in rows}


def test_default_config_lands_in_published_bands():
    m = build(ModelConfig(), seed=0)
    params = count_params(m)
    flops = count_flops(m)
    assert 2.772e6 * 0.85 <= params <= 2.772e6 * 1.15
    assert 4.4e9 * 0.80 <= flops <= 4.4e9 * 1.20


def test_flops_scale_quadratically_with_input():
    m = tiny_model()
    assert count_flops(m, 128) == pytest.approx(4 * count_flops(m, 64), rel=0.02)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path):
    m = tiny_model(5)
    # make buffers non-trivial
    x = Tensor(np.random.default_rng(0).uniform(0, 1, (2, 3, 64, 64)).astype(np.float32))
    m(x)
    path = tmp_path / "m.ckpt"
    vel = [np.full_like(p.data, 0.25) for _, p in m.named_parameters()]
    save_checkpoint(m, path, meta={"epoch": 3}, optimizer_state=vel)

    again, meta, optim = load_checkpoint(path)
    assert meta == {"epoch": 3}
    for (na, pa), (nb, pb) in zip(m.named_parameters(), again.named_parameters()):
        assert na == nb
        assert_allclose(pa.data, pb.data)
    for (na, ba), (nb, bb) in zip(m.named_buffers(), again.named_buffers()):
        assert_allclose(ba, bb, err_msg=na)
    assert len(optim) == len(vel)
    for v, w in zip(vel, optim):
        assert_allclose(v.astype(np.float32), w)


def test_checkpoint_header_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = path.read_bytes()
    assert raw[:4] == CHECKPOINT_MAGIC
    version, hlen = struct.unpack("<IQ", raw[4:16])
    assert version == 1
    header = json.loads(raw[16 : 16 + hlen])
    assert header["payload_bytes"] == len(raw) - 16 - hlen
    assert header["config"]["num_classes"] == 2
    names = [e["name"] for e in header["tensors"]]
    assert "stem.conv.conv.weight" in names or any("stem" in n for n in names)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


def test_checkpoint_wrong_version(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_checkpoint_payload_corruption_detected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = bytearray(path.read_bytes())
    hlen = struct.unpack("<Q", raw[8:16])[0]
    flip = 16 + hlen + 100
    raw[flip] ^= 0xFF
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 64])
    with pytest.raises(CheckpointIntegrityError):
        load_checkpoint(path)


def test_checkpoint_config_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    other = ModelConfig(num_classes=9, input_size=64, width_mult=0.0625)
    with pytest.raises(CheckpointConfigError):
        load_checkpoint(path, config=other)
    # the exact config is accepted
    model, _, _ = load_checkpoint(path, config=TINY)
    assert model.config == TINY


def test_checkpoint_shape_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path)
    raw = path.read_bytes()
    hlen = struct.unpack("<Q", raw[8:16])[0]
    header = json.loads(raw[16 : 16 + hlen])
    entry = header["tensors"][0]
    entry["shape"] = [entry["nbytes"] // 4]  # same bytes, flattened shape
    hbytes = json.dumps(header, sort_keys=True).encode()
    path.write_bytes(raw[:8] + struct.pack("<Q", len(hbytes)) + hbytes + raw[16 + hlen :])
    with pytest.raises(CheckpointShapeError):
        load_checkpoint(path)


def test_read_header_smoke(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(tiny_model(), path, meta={"note": "x"})
    header = read_header(path)
    assert header["meta"] == {"note": "x"}
    assert header["config"] == TINY.to_dict()
