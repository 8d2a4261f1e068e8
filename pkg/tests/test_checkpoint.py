import numpy as np
import pytest

from idaseg.checkpoint import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    IntegrityError,
    load_checkpoint,
    save_checkpoint,
)


def _sample_ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint(
        arrays={
            "model/weight": rng.standard_normal((3, 4)),
            "model/bias": rng.standard_normal(4),
            "step": np.array(17, dtype=np.int64),
            "bytes": rng.integers(0, 256, size=9).astype(np.uint8),
        },
        meta={"kind": "test", "config": {"lr": 2.5e-4, "seed": 0}},
    )


def test_roundtrip_exact(tmp_path):
    ckpt = _sample_ckpt()
    path = save_checkpoint(tmp_path / "a.ckpt", ckpt)
    back = load_checkpoint(path)
    assert back.meta == ckpt.meta
    assert set(back.arrays) == set(ckpt.arrays)
    for name, arr in ckpt.arrays.items():
        got = back.arrays[name]
        assert got.dtype == arr.dtype
        assert got.shape == arr.shape
        assert np.array_equal(got, arr)


def test_loaded_arrays_are_writable(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", _sample_ckpt())
    back = load_checkpoint(path)
    back.arrays["model/bias"][0] = 99.0  # must not raise (copied, not a frombuffer view)


def test_resave_is_byte_identical(tmp_path):
    ckpt = _sample_ckpt()
    p1 = save_checkpoint(tmp_path / "a.ckpt", ckpt)
    p2 = save_checkpoint(tmp_path / "b.ckpt", load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_insertion_order_does_not_change_bytes(tmp_path):
    ckpt = _sample_ckpt()
    reversed_arrays = dict(reversed(list(ckpt.arrays.items())))
    p1 = save_checkpoint(tmp_path / "a.ckpt", ckpt)
    p2 = save_checkpoint(tmp_path / "b.ckpt", Checkpoint(arrays=reversed_arrays, meta=ckpt.meta))
    assert p1.read_bytes() == p2.read_bytes()


def test_overwrite_existing(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _sample_ckpt())
    save_checkpoint(path, Checkpoint(arrays={"x": np.zeros(2)}, meta={}))
    assert list(load_checkpoint(path).arrays) == ["x"]


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _sample_ckpt())
    raw = bytearray(path.read_bytes())
    raw[:8] = b"NOTMAGIC"
    path.write_bytes(raw)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_corrupt_payload_detected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _sample_ckpt())
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0xFF
    path.write_bytes(raw)
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_truncation_detected(tmp_path):
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, _sample_ckpt())
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(IntegrityError):
        load_checkpoint(path)


def test_tiny_file_rejected(tmp_path):
    path = tmp_path / "a.ckpt"
    path.write_bytes(MAGIC[:4])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises((CheckpointError, FileNotFoundError)):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_empty_arrays_ok(tmp_path):
    path = save_checkpoint(tmp_path / "a.ckpt", Checkpoint(arrays={}, meta={"k": 1}))
    back = load_checkpoint(path)
    assert back.arrays == {}
    assert back.meta == {"k": 1}


def test_no_temp_file_left_behind(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", _sample_ckpt())
    leftovers = [p for p in tmp_path.iterdir() if p.name != "a.ckpt"]
    assert leftovers == []
