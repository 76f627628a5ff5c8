import struct

import numpy as np
import pytest

from uamf import tensor as T
from uamf.checkpoint import (FORMAT_VERSION, decode, encode, load_checkpoint, model_from_checkpoint, restore,
                             save_checkpoint, to_checkpoint)
from uamf.errors import CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError
from uamf.gradcheck import tiny_model_config
from uamf.model import ModelConfig, UAMobileFormer


@pytest.fixture
def model():
    return UAMobileFormer(tiny_model_config(), np.random.default_rng(3))


def test_roundtrip_bitwise(model, tmp_path):
    path = save_checkpoint(model, tmp_path / "m.ckpt", rng_state=b"\x01\x02")
    ckpt = load_checkpoint(path)
    assert ckpt.config == model.cfg and ckpt.rng_state == b"\x01\x02"
    assert ckpt.format_version == FORMAT_VERSION
    for name, p in model.named_parameters():
        assert ckpt.parameters[name].dtype == p.dtype
        assert np.array_equal(ckpt.parameters[name], p.data)
    assert list(ckpt.parameters) == [n for n, _ in model.named_parameters()]


def test_roundtrip_preserves_eval_logits(model, tmp_path):
    x = np.random.default_rng(0).random((3, 2, 4, 8, 8)).astype(np.float32)
    before = model.eval()(x).logits.data
    clone = model_from_checkpoint(load_checkpoint(save_checkpoint(model, tmp_path / "m.ckpt")))
    assert np.array_equal(before, clone.eval()(x).logits.data)


def test_float64_roundtrip(tmp_path):
    with T.default_dtype(np.float64):
        m = UAMobileFormer(tiny_model_config())
    clone = model_from_checkpoint(decode(encode(to_checkpoint(m))))
    assert clone.stem.weight.dtype == np.float64
    assert np.array_equal(clone.stem.weight.data, m.stem.weight.data)


def test_header_layout(model):
    raw = encode(to_checkpoint(model))
    assert raw[:4] == b"UAMF"
    assert struct.unpack("<I", raw[4:8])[0] == 1
    (n,) = struct.unpack("<I", raw[8:12])
    assert raw[12:12 + n].decode().startswith('{"channel_schedule"')


def test_corrupt_header_is_version_error(model):
    raw = bytearray(encode(to_checkpoint(model)))
    with pytest.raises(CheckpointVersionError):
        decode(b"JUNK" + bytes(raw[4:]))
    raw[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointVersionError, match="99"):
        decode(bytes(raw))


def test_truncated_file(model):
    raw = encode(to_checkpoint(model))
    for cut in (6, 40, len(raw) // 2, len(raw) - 1):
        with pytest.raises(CheckpointTruncatedError):
            decode(raw[:cut])


def test_shape_mismatch_names_parameter(model):
    other = UAMobileFormer(ModelConfig(**{**tiny_model_config().to_dict(), "head_hidden": 12}))
    with pytest.raises(CheckpointShapeError, match="head_fc1.weight"):
        restore(other, to_checkpoint(model))
    smaller = UAMobileFormer(ModelConfig(**{**tiny_model_config().to_dict(), "enable_dy_relu": False}))
    with pytest.raises(CheckpointShapeError, match="inventory"):
        restore(smaller, to_checkpoint(model))
