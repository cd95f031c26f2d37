import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nanonas.checkpoint import (
    MAGIC, VERSION, CheckpointError, ChecksumError, checkpoint_bytes, decode_tensors, encode_tensors,
    is_checkpoint, load_checkpoint, parse_checkpoint, save_checkpoint,
)
from nanonas.net import build
from nanonas.quant import FLOAT, QuantSpec
from nanonas.tensor import Tensor

from conftest import tiny_config


@pytest.fixture
def calibrated(tiny_model, rng):
    tiny_model(Tensor(rng.normal(size=(2, 1, 200))))
    return tiny_model.eval()


class TestRoundTrip:
    def test_save_load_save_is_byte_identical(self, calibrated, tmp_path):
        first = save_checkpoint(calibrated, tmp_path / "a.ckpt", {"stage": "train", "losses": [1.5, 0.25]})
        model, meta = load_checkpoint(first)
        second = save_checkpoint(model, tmp_path / "b.ckpt", meta)
        assert first.read_bytes() == second.read_bytes()
        assert meta == {"stage": "train", "losses": [1.5, 0.25]}

    def test_loaded_model_predicts_identically(self, calibrated, rng):
        model, _ = parse_checkpoint(checkpoint_bytes(calibrated))
        x = Tensor(rng.normal(size=(3, 1, 200)))
        np.testing.assert_array_equal(model(x).data, calibrated(x).data)
        assert model.config == calibrated.config and not model.training

    @pytest.mark.parametrize("quant", [FLOAT, QuantSpec(8, 4), QuantSpec(16, 16)])
    def test_precisions(self, quant, rng, tmp_path):
        model = build(tiny_config(quant=quant), seed=3)
        model(Tensor(rng.normal(size=(2, 1, 200))))
        path = save_checkpoint(model.eval(), tmp_path / "m.ckpt")
        assert is_checkpoint(path)
        loaded, _ = load_checkpoint(path)
        assert loaded.quant_state() == model.quant_state()

    @given(st.dictionaries(st.text("abcxyz.", min_size=1, max_size=8),
                           st.lists(st.integers(1, 4), min_size=0, max_size=3), max_size=5))
    def test_tensor_table_roundtrip(self, shapes):
        rng = np.random.default_rng(0)
        state = {k: rng.normal(size=s).astype(np.float32) for k, s in shapes.items()}
        out = decode_tensors(encode_tensors(state))
        assert sorted(out) == sorted(state)
        for k in state:
            assert out[k].shape == state[k].shape and np.array_equal(out[k], state[k])


class TestCorruption:
    def test_truncated(self, calibrated):
        raw = checkpoint_bytes(calibrated)
        for cut in (6, 20, len(raw) // 2, len(raw) - 1):
            with pytest.raises(ChecksumError):
                parse_checkpoint(raw[:cut])

    def test_trailing_bytes(self, calibrated):
        with pytest.raises(ChecksumError):
            parse_checkpoint(checkpoint_bytes(calibrated) + b"\0")

    def test_bad_magic(self, calibrated, tmp_path):
        raw = b"XXXX" + checkpoint_bytes(calibrated)[4:]
        with pytest.raises(CheckpointError):
            parse_checkpoint(raw)
        (tmp_path / "x").write_bytes(raw)
        assert not is_checkpoint(tmp_path / "x")

    def test_future_version(self, calibrated):
        raw = checkpoint_bytes(calibrated)
        raw = MAGIC + struct.pack("<I", VERSION + 1) + raw[8:]
        with pytest.raises(CheckpointError, match="version"):
            parse_checkpoint(raw)

    def test_flipped_tensor_byte(self, calibrated):
        raw = bytearray(checkpoint_bytes(calibrated))
        (n_cfg,) = struct.unpack_from("<I", raw, 8)
        raw[8 + 4 + n_cfg + 4 + 10] ^= 0xFF
        with pytest.raises(ChecksumError):
            parse_checkpoint(bytes(raw))

    def test_crc_covers_tensor_section(self, calibrated):
        raw = checkpoint_bytes(calibrated)
        (n_cfg,) = struct.unpack_from("<I", raw, 8)
        (n_tab,) = struct.unpack_from("<I", raw, 12 + n_cfg)
        table = raw[16 + n_cfg : 16 + n_cfg + n_tab]
        assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(table)
