"""Checkpoint format round-trip and corruption handling."""
import json
import struct

import numpy as np
import pytest

from voteseg.checkpoint import CheckpointError, load_arrays, save_arrays


def test_roundtrip_preserves_arrays(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {
        "enc.w0": rng.normal(size=(9, 32)).astype(np.float32),
        "enc.b0": np.zeros(32, dtype=np.float32),
        "head.w1": rng.normal(size=(64, 3)).astype(np.float32),
    }
    path = tmp_path / "model.ckpt"
    save_arrays(path, arrays, meta={"gcn_layers": 10, "agg_mode": "geometric"})
    loaded, meta = load_arrays(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        np.testing.assert_array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == np.float32
    assert meta["gcn_layers"] == 10


def test_float64_input_stored_as_float32(tmp_path):
    path = tmp_path / "m.ckpt"
    save_arrays(path, {"w": np.array([[1.0, 2.0]], dtype=np.float64)})
    loaded, _ = load_arrays(path)
    assert loaded["w"].dtype == np.float32


def test_header_layout(tmp_path):
    """First 8 bytes are a little-endian u64 header length; header is JSON."""
    path = tmp_path / "m.ckpt"
    save_arrays(path, {"w": np.ones((2, 2), dtype=np.float32)})
    blob = path.read_bytes()
    (hlen,) = struct.unpack("<Q", blob[:8])
    header = json.loads(blob[8:8 + hlen])
    assert header["arrays"]["w"]["shape"] == [2, 2]
    assert header["arrays"]["w"]["offset"] == 0
    payload = blob[8 + hlen:]
    np.testing.assert_array_equal(
        np.frombuffer(payload, dtype="<f4").reshape(2, 2), np.ones((2, 2)))


def test_save_is_deterministic(tmp_path):
    arrays = {"b": np.arange(3, dtype=np.float32), "a": np.ones((2,), dtype=np.float32)}
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_arrays(p1, arrays, meta={"k": 1})
    save_arrays(p2, dict(reversed(arrays.items())), meta={"k": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    save_arrays(path, {"w": np.ones(8, dtype=np.float32)})
    blob = path.read_bytes()
    path.write_bytes(blob[:-4])
    with pytest.raises(CheckpointError, match="past end"):
        load_arrays(path)


def test_garbage_header_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(struct.pack("<Q", 5) + b"nope!" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="JSON"):
        load_arrays(path)


def test_short_file_rejected(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"\x01\x02")
    with pytest.raises(CheckpointError, match="truncated"):
        load_arrays(path)
