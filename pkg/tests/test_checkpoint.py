import struct

import numpy as np
import pytest

from gaprune import MLP
from gaprune.checkpoint import MAGIC, decode_block, dumps, load_checkpoint, loads, pack_mask, save_checkpoint
from gaprune.errors import FormatError


def _masks(model, seed=0):
    rng = np.random.default_rng(seed)
    return {lin.name: rng.random(lin.weight.shape) < 0.5 for lin in model.linears()[:-1]}


def test_mask_bit_order():
    assert pack_mask(np.array([1, 0, 1, 0, 0, 1], bool)) == bytes([0b00100101])
    assert pack_mask(np.ones(9, bool)) == b"\xff\x01"


def test_header_layout(tiny_model):
    buf = dumps(tiny_model, {})
    assert buf[:8] == MAGIC
    assert struct.unpack_from("<I", buf, 8) == (6,)
    assert struct.unpack_from("<H", buf, 12) == (len("fc0.weight"),)
    assert buf[14:24] == b"fc0.weight"
    assert struct.unpack_from("<BIIB", buf, 24) == (2, 10, 6, 1)
    w = np.frombuffer(buf, "<f8", count=60, offset=34)
    assert w.tobytes() == tiny_model.layer("fc0").weight.tobytes()
    assert buf[-4:] == b"\x00\x00\x00\x00"


def test_round_trip_bit_exact(tiny_model, tmp_path):
    masks = _masks(tiny_model)
    save_checkpoint(tiny_model, masks, tmp_path / "a.ckpt")
    model, got = load_checkpoint(tmp_path / "a.ckpt")
    assert model.sizes == tiny_model.sizes
    for k, v in tiny_model.parameters().items():
        assert model.parameters()[k].tobytes() == v.tobytes()
    assert list(got) == list(masks)
    for name in masks:
        np.testing.assert_array_equal(got[name], masks[name])
    save_checkpoint(model, got, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_special_values_survive():
    model = MLP.from_sizes([2, 2], seed=0)
    model.layer("fc0").weight[...] = [[-0.0, 1e-310], [np.finfo(float).max, -1.5]]
    out, _ = loads(dumps(model, {}))
    assert out.layer("fc0").weight.tobytes() == model.layer("fc0").weight.tobytes()


def test_decode_block_reports_end(tiny_model):
    buf = dumps(tiny_model, _masks(tiny_model)) + b"tail"
    tensors, masks, end = decode_block(buf, len(MAGIC))
    assert buf[end:] == b"tail"
    assert len(tensors) == 6 and len(masks) == 2


@pytest.mark.parametrize("mutate", [
    lambda b: b"GAPCKPT2" + b[8:],
    lambda b: b[:-1],
    lambda b: b + b"\x00",
    lambda b: b[:8],
])
def test_corrupt_checkpoints(tiny_model, mutate):
    buf = dumps(tiny_model, _masks(tiny_model))
    with pytest.raises(FormatError):
        loads(mutate(buf))


def test_mask_shape_must_match(tiny_model):
    with pytest.raises(FormatError):
        loads(dumps(tiny_model, {"fc0": np.ones((3, 3), bool)}))


def test_bad_dtype_code(tiny_model):
    buf = bytearray(dumps(tiny_model, {}))
    buf[33] = 2
    with pytest.raises(FormatError, match="dtype"):
        loads(bytes(buf))
