import struct

import numpy as np
import pytest

from iterseg.checkpoint import MAGIC, CheckpointError, load_checkpoint, read_checkpoint, save_checkpoint
from iterseg.network import NetworkConfig, build

CFG = NetworkConfig(16, 16, stages=2, base_channels=2)


def test_round_trip_bit_identical(tmp_path):
    params = build(CFG, seed=11)
    path = tmp_path / "a.iseg"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path, CFG)
    for (na, ta), (nb, tb) in zip(params.named_tensors(), loaded.named_tensors()):
        assert na == nb
        assert ta.data.tobytes() == tb.data.tobytes()
    save_checkpoint(loaded, tmp_path / "b.iseg")
    assert path.read_bytes() == (tmp_path / "b.iseg").read_bytes()


def test_layout_header(tmp_path):
    params = build(CFG)
    path = tmp_path / "a.iseg"
    save_checkpoint(params, path)
    buf = path.read_bytes()
    assert buf[:4] == MAGIC
    version, count = struct.unpack("<HI", buf[4:10])
    assert version == 1 and count == len(params.parameters())
    (nlen,) = struct.unpack("<H", buf[10:12])
    assert buf[12 : 12 + nlen] == b"img_stem.weight"
    assert buf[12 + nlen] == 4  # rank


def test_bad_magic(tmp_path):
    path = tmp_path / "x.iseg"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(path)


def test_truncated(tmp_path):
    path = tmp_path / "a.iseg"
    save_checkpoint(build(CFG), path)
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(path, CFG)


def test_trailing_bytes(tmp_path):
    path = tmp_path / "a.iseg"
    save_checkpoint(build(CFG), path)
    path.write_bytes(path.read_bytes() + b"\0")
    with pytest.raises(CheckpointError, match="trailing"):
        read_checkpoint(path)


def test_config_mismatch_names_layer(tmp_path):
    path = tmp_path / "a.iseg"
    save_checkpoint(build(CFG), path)
    wider = NetworkConfig(16, 16, stages=2, base_channels=4)
    with pytest.raises(CheckpointError, match="shape mismatch at layer img_stem.weight"):
        load_checkpoint(path, wider)
    deeper = NetworkConfig(16, 16, stages=3, base_channels=2)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, deeper)
    shallower = NetworkConfig(16, 16, stages=1, base_channels=2)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, shallower)


def test_float64_parameters_saved_as_float32(tmp_path):
    params = build(CFG, dtype=np.float64)
    path = tmp_path / "a.iseg"
    save_checkpoint(params, path)
    loaded = load_checkpoint(path, CFG, dtype=np.float64)
    w = params.layers["head"].weight.data
    np.testing.assert_array_equal(loaded.layers["head"].weight.data, w.astype(np.float32))
