"""Binary tensor container: exact bytes, round trips, corruption handling."""

import struct
import zlib

import numpy as np
import pytest

from fedtt.checkpoint import (
    MAGIC,
    VERSION,
    inspect_checkpoint,
    load_checkpoint,
    save_checkpoint,
)
from fedtt.errors import CheckpointError


def reference_bytes(tensors: dict) -> bytes:
    """Byte-level oracle built independently from the format description."""
    body = b"FTT1" + struct.pack("<I", 1) + struct.pack("<I", len(tensors))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            body += struct.pack("<I", d)
        body += np.asarray(arr, dtype="<f4").tobytes(order="C")
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def retag(blob: bytes) -> bytes:
    """Recompute the trailing CRC after byte surgery."""
    body = blob[:-4]
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_save_matches_byte_oracle(tmp_path):
    tensors = {
        "a": np.array([1.5, -2.0], dtype=np.float32),
        "blk.w": np.arange(6, dtype=np.float32).reshape(2, 3),
    }
    path = tmp_path / "c.bin"
    save_checkpoint(path, tensors)
    assert path.read_bytes() == reference_bytes(tensors)


def test_empty_checkpoint_is_sixteen_bytes(tmp_path):
    path = tmp_path / "empty.bin"
    save_checkpoint(path, {})
    blob = path.read_bytes()
    assert len(blob) == 16
    assert blob[:4] == MAGIC
    assert struct.unpack("<I", blob[4:8])[0] == VERSION
    assert struct.unpack("<I", blob[8:12])[0] == 0
    assert struct.unpack("<I", blob[12:])[0] == zlib.crc32(blob[:12])
    assert load_checkpoint(path) == {}


def test_round_trip_preserves_order_and_values(tmp_path, rng):
    tensors = {
        "z.first": rng.normal(size=(3, 4)).astype(np.float32),
        "a.second": rng.normal(size=(2, 2, 2)).astype(np.float32),
        "m": np.float32(rng.normal(size=(5,))),
    }
    path = tmp_path / "c.bin"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert list(back) == list(tensors)  # file order, not sorted
    for k in tensors:
        assert back[k].dtype == np.float32
        assert np.array_equal(back[k], tensors[k])


def test_float64_input_is_stored_as_float32(tmp_path):
    val = np.array([1 / 3], dtype=np.float64)
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"x": val})
    back = load_checkpoint(path)["x"]
    assert back.dtype == np.float32
    assert back[0] == np.float32(1 / 3)


def test_non_ascii_names_round_trip(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"poids.tête": np.zeros(2, dtype=np.float32)})
    assert "poids.tête" in load_checkpoint(path)


def test_crc_check_runs_before_parsing(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {"a": np.ones(3, dtype=np.float32)})
    blob = bytearray(path.read_bytes())
    blob[9] ^= 0xFF  # poison the entry count field
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="CRC mismatch"):
        load_checkpoint(path)


def test_too_short_file_is_rejected(tmp_path):
    path = tmp_path / "c.bin"
    path.write_bytes(b"FTT1\x01")
    with pytest.raises(CheckpointError, match="16"):
        load_checkpoint(path)


def test_bad_magic_with_valid_crc(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {})
    blob = bytearray(path.read_bytes())
    blob[0:4] = b"NOPE"
    path.write_bytes(retag(bytes(blob)))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {})
    blob = bytearray(path.read_bytes())
    blob[4:8] = struct.pack("<I", 9)
    path.write_bytes(retag(bytes(blob)))
    with pytest.raises(CheckpointError, match="version 9"):
        load_checkpoint(path)


def test_truncated_entry_reports_offset(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {})
    blob = bytearray(path.read_bytes())
    blob[8:12] = struct.pack("<I", 3)  # promises entries that are not there
    path.write_bytes(retag(bytes(blob)))
    with pytest.raises(CheckpointError, match="offset 12"):
        load_checkpoint(path)


def test_trailing_garbage_reports_offset(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(path, {})
    blob = path.read_bytes()
    path.write_bytes(retag(blob[:-4] + b"\x00\x00\x00\x00\x00"))
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_scalar_and_empty_tensors(tmp_path):
    tensors = {
        "scalar": np.array(2.5, dtype=np.float32),
        "empty": np.zeros((0, 3), dtype=np.float32),
    }
    path = tmp_path / "c.bin"
    save_checkpoint(path, tensors)
    back = load_checkpoint(path)
    assert back["scalar"].shape == ()
    assert float(back["scalar"]) == 2.5
    assert back["empty"].shape == (0, 3)


def test_save_rejects_empty_name(tmp_path):
    with pytest.raises(ValueError, match="name"):
        save_checkpoint(tmp_path / "c.bin", {"": np.zeros(1)})


def test_inspect_summary(tmp_path):
    path = tmp_path / "c.bin"
    save_checkpoint(
        path,
        {"w": np.array([[1.0, -4.0]], dtype=np.float32), "b": np.zeros(3, dtype=np.float32)},
    )
    info = inspect_checkpoint(path)
    assert info["version"] == VERSION
    assert info["count"] == 2
    assert info["total_params"] == 5
    assert info["bytes"] == path.stat().st_size
    w = info["entries"][0]
    assert w["name"] == "w" and w["shape"] == (1, 2)
    assert w["min"] == -4.0 and w["max"] == 1.0


def test_load_missing_file_raises_oserror(tmp_path):
    with pytest.raises(OSError):
        load_checkpoint(tmp_path / "missing.bin")
