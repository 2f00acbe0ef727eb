import numpy as np
import pytest

from raildefect.ckpt import load_checkpoint, save_checkpoint
from raildefect.errors import CheckpointError


def test_round_trip(tmp_path):
    tensors = {
        "backbone.stem.0.weight": np.random.default_rng(0).normal(size=(4, 1, 3, 3)).astype(np.float32),
        "head.bias": np.zeros(4, dtype=np.float64),
        "counter": np.array(7, dtype=np.int64),
    }
    meta = {"kind": "classifier", "feature_dim": 128}
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, tensors, meta)
    loaded, loaded_meta = load_checkpoint(path)
    assert loaded_meta == meta
    assert set(loaded) == set(tensors)
    for k in tensors:
        assert loaded[k].dtype == tensors[k].dtype
        np.testing.assert_array_equal(loaded[k], tensors[k])


def test_deterministic_bytes(tmp_path):
    tensors = {"a": np.arange(12, dtype=np.float32).reshape(3, 4)}
    save_checkpoint(tmp_path / "x.ckpt", tensors, {"k": 1})
    save_checkpoint(tmp_path / "y.ckpt", tensors, {"k": 1})
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_garbage_file(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"not a zip at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(p)
