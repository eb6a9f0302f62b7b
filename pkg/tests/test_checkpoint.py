import numpy as np
import pytest

from monoindoor import checkpoint


def test_round_trip(tmp_path):
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "scalar": np.float32(2.5),
               "b.c": np.ones((1, 2, 3, 4), np.float32)}
    manifest = {"train.epochs": "3", "note": "x=y"}
    checkpoint.save(tmp_path / "m.midx", tensors, manifest)
    back, man = checkpoint.load(tmp_path / "m.midx")
    assert man == manifest
    assert set(back) == set(tensors)
    for k in tensors:
        assert np.array_equal(back[k], tensors[k])


def test_layout():
    data = checkpoint.encode({"w": np.array([1.0], np.float32)}, {"k": "v"})
    assert data.startswith(b"MIDX1\n")
    assert data[6:10] == (4).to_bytes(4, "little")
    assert data[10:14] == b"k=v\n"
    assert data[-4:] == np.float32(1.0).tobytes()


def test_bad_magic():
    with pytest.raises(checkpoint.CheckpointVersionError):
        checkpoint.decode(b"MIDX2\n" + b"\x00" * 8)


def test_truncated():
    data = checkpoint.encode({"w": np.ones(4, np.float32)}, {})
    with pytest.raises(checkpoint.CheckpointFormatError):
        checkpoint.decode(data[:-3])
