import struct

import numpy as np
import pytest

from tokenmerge.checkpoint import (
    CONFIG_ENTRY,
    CheckpointError,
    decode_config,
    dumps,
    load,
    loads,
    model_tensors,
    restore_model,
    save_model,
)
from tokenmerge.groupmap import group_text, ppm_bytes, read_ppm, write_group_map
from tokenmerge.model import VitModel

from conftest import images_for, tiny_config


def test_round_trip_bit_exact(rng):
    tensors = {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=5).astype(np.float32),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3), np.float32),
        "ünï": np.array([np.nan, np.inf, -0.0]),
    }
    back = loads(dumps(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].dtype == tensors[k].dtype and back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_entry_layout():
    buf = dumps({"w": np.array([[1.0, 2.0]], np.float32)})
    assert buf[:10] == struct.pack("<4sHI", b"FPET", 1, 1)
    expect = struct.pack("<H", 1) + b"w" + bytes([2]) + struct.pack("<2Q", 1, 2) + bytes([0])
    assert buf[10:10 + len(expect)] == expect
    assert buf[10 + len(expect):] == np.array([1.0, 2.0], "<f4").tobytes()


def test_errors():
    good = dumps({"w": np.ones(3)})
    with pytest.raises(CheckpointError, match="magic"):
        loads(b"NOPE" + good[4:])
    with pytest.raises(CheckpointError, match="truncated"):
        loads(good[:-1])
    with pytest.raises(CheckpointError, match="trailing"):
        loads(good + b"\x00")
    with pytest.raises(CheckpointError, match="dtype"):
        dumps({"i": np.arange(3)})


def test_model_round_trip(tmp_path, rng):
    cfg = tiny_config(adapter="lora", merge_method="bdm", merge_layer=1, refine_hidden=4)
    m = VitModel(cfg)
    for node in m.trainable_params().values():
        node.value = rng.normal(size=node.shape)
    path = tmp_path / "ck.fpet"
    save_model(path, m)
    tensors = load(path)
    assert not any(k.startswith("blocks.") or k in ("pos", "cls") for k in tensors)
    assert decode_config(tensors[CONFIG_ENTRY])["merge_method"] == "bdm"

    fresh = VitModel(cfg)
    restore_model(fresh, tensors)
    x = images_for(cfg, 2)
    assert fresh(x).value.tobytes() == m(x).value.tobytes()


def test_mismatched_architecture(tmp_path):
    m = VitModel(tiny_config(adapter="lora"))
    tensors = model_tensors(m)
    with pytest.raises(CheckpointError, match="config"):
        restore_model(VitModel(tiny_config(adapter="adaptformer")), tensors)
    del tensors[CONFIG_ENTRY]
    with pytest.raises(CheckpointError, match="missing"):
        restore_model(VitModel(tiny_config(adapter="adaptformer")), tensors)
    tensors["head.w"] = np.zeros((2, 2))
    with pytest.raises(CheckpointError, match="shape"):
        restore_model(VitModel(tiny_config(adapter="lora")), tensors)


def test_adapter_checkpoint_small():
    m = VitModel(tiny_config(dim=64, heads=4, depth=4, grid=(8, 8), patch=4, adapter="adaptformer"))
    small = len(dumps(model_tensors(m)))
    full = len(dumps(model_tensors(m, include_backbone=True)))
    assert small <= 0.05 * full


class TestGroupMap:
    def test_text(self):
        assert group_text(np.array([[5, 5], [2, 2]])) == "0 0\n1 1\n"

    def test_ppm(self, tmp_path):
        g = np.array([[3, 1], [1, 3]])
        txt, ppm = write_group_map(g, tmp_path, "s0", cell=2)
        img = read_ppm(ppm.read_bytes())
        assert img.shape == (4, 4, 3)
        assert np.array_equal(img[0, 0], img[2, 2]) and not np.array_equal(img[0, 0], img[0, 2])
        assert ppm.read_bytes().startswith(b"P6\n4 4\n255\n")
        assert txt.read_text() == "0 1\n1 0\n"
        assert ppm_bytes(g, 2) == ppm.read_bytes()
