import struct

import numpy as np
import pytest

from tokenmerge.data import (
    HEADER_SIZE,
    Dataset,
    DatasetError,
    SyntheticSpec,
    class_templates,
    from_bytes,
    load,
    parse_grid,
    synth,
)


def test_header_layout():
    d = Dataset(np.zeros((0, 1, 2, 3), np.uint8), np.zeros(0, int), 5)
    buf = d.to_bytes()
    assert HEADER_SIZE == 18 and len(buf) == 18
    assert struct.unpack("<4sHIHHHH", buf) == (b"TKDS", 1, 0, 1, 2, 3, 5)


def test_empty_dataset_round_trip():
    d = from_bytes(Dataset(np.zeros((0, 1, 1, 1), np.uint8), np.zeros(0, int), 2).to_bytes())
    assert len(d) == 0 and d.num_classes == 2


def test_pixel_255_is_one(tmp_path):
    Dataset(np.full((1, 1, 1, 1), 255, np.uint8), [0], 2).save(tmp_path / "one.tkds")
    d = load(tmp_path / "one.tkds")
    assert d.images()[0, 0, 0, 0] == 1.0


def test_file_length_and_round_trip(tmp_path):
    d = synth(SyntheticSpec(n=37, channels=2, grid=(3, 5), patch=2, classes=3))
    buf = d.to_bytes()
    assert len(buf) == HEADER_SIZE + 37 * (2 + 2 * 6 * 10)
    path = tmp_path / "d.tkds"
    d.save(path)
    back = load(path)
    assert back.to_bytes() == buf
    assert np.array_equal(back.pixels, d.pixels) and np.array_equal(back.labels, d.labels)


def test_record_layout():
    d = Dataset(np.arange(4, dtype=np.uint8).reshape(1, 1, 2, 2), [1], 2)
    assert d.to_bytes()[HEADER_SIZE:] == b"\x01\x00\x00\x01\x02\x03"


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + b"\x02\x00" + b[6:], "version"),
        (lambda b: b[:-1], "truncated"),
        (lambda b: b + b"\x00", "padded"),
        (lambda b: b[:10], "too short"),
    ],
)
def test_corrupt_files(mutate, match):
    buf = synth(SyntheticSpec(n=4, grid=(2, 2), patch=1)).to_bytes()
    with pytest.raises(DatasetError, match=match):
        from_bytes(mutate(buf))


def test_label_out_of_range():
    buf = bytearray(Dataset(np.zeros((1, 1, 1, 1), np.uint8), [1], 2).to_bytes())
    buf[HEADER_SIZE] = 7
    with pytest.raises(DatasetError, match="num_classes"):
        from_bytes(bytes(buf))


def test_missing_file(tmp_path):
    with pytest.raises(DatasetError, match="no such"):
        load(tmp_path / "nope.tkds")


def test_synth_deterministic():
    spec = SyntheticSpec(n=50, seed=9)
    assert synth(spec).to_bytes() == synth(spec).to_bytes()
    assert synth(spec).to_bytes() != synth(SyntheticSpec(n=50, seed=10)).to_bytes()


@pytest.mark.parametrize("n,k", [(100, 4), (101, 3), (7, 2), (1000, 7)])
def test_class_priors(n, k):
    counts = np.bincount(synth(SyntheticSpec(n=n, classes=k)).labels, minlength=k)
    assert counts.max() - counts.min() <= 1


def test_linear_probe_separates_at_zero_noise():
    d = synth(SyntheticSpec(n=200, classes=2, sigma=0.0, grid=(4, 4), patch=2))
    x = d.images().reshape(len(d), -1).astype(np.float64)
    y = np.where(d.labels == 1, 1.0, -1.0)
    feats = np.hstack([x, np.ones((len(d), 1))])
    w, *_ = np.linalg.lstsq(feats, y, rcond=None)
    assert np.all(np.sign(feats @ w) == y)


def test_templates_distinct():
    t = class_templates(SyntheticSpec(classes=5))
    flat = t.reshape(5, -1)
    assert len({row.tobytes() for row in flat}) == 5


def test_batches_reproducible():
    d = synth(SyntheticSpec(n=40))
    a = [lab.tolist() for _, lab in d.batches(16, shuffle_seed=3)]
    b = [lab.tolist() for _, lab in d.batches(16, shuffle_seed=3)]
    assert a == b and sum(len(x) for x in a) == 40
    assert a != [lab.tolist() for _, lab in d.batches(16)]


def test_split_disjoint():
    d = synth(SyntheticSpec(n=50))
    tr, va = d.split(0.2, seed=1)
    assert len(tr) == 40 and len(va) == 10


def test_spec_parse():
    s = SyntheticSpec.parse("grid=4x6,classes=3,sigma=0.5,seed=2,n=10")
    assert (s.grid, s.classes, s.sigma, s.seed, s.n) == ((4, 6), 3, 0.5, 2, 10)
    with pytest.raises(ValueError, match="unknown"):
        SyntheticSpec.parse("colour=red")
    with pytest.raises(ValueError, match="classes"):
        SyntheticSpec(classes=1)
    with pytest.raises(ValueError, match="HxW"):
        parse_grid("8by8")
