import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from heartlora.data import (
    FAMILIES,
    DatasetFormatError,
    RawDataset,
    SyntheticTaskSpec,
    generate,
    load_raw,
    pretrain_spec,
    save_raw,
)


def test_noise_free_classes_are_constant():
    spec = SyntheticTaskSpec(noise_std=0.0, train_size=40, val_size=10, test_size=10, image_size=8)
    train = generate(spec)["train"]
    for c in range(spec.num_classes):
        imgs = train.images[train.labels == c]
        assert len(imgs) == 4
        assert (imgs == imgs[0]).all()


@pytest.mark.parametrize("family", FAMILIES)
def test_generation_is_reproducible_and_balanced(family):
    spec = SyntheticTaskSpec(family=family, train_size=50, val_size=20, test_size=20, image_size=8)
    a, b = generate(spec), generate(spec)
    for split in a:
        assert a[split].equals(b[split])
        counts = np.bincount(a[split].labels, minlength=spec.num_classes)
        assert counts.max() - counts.min() <= 1
    assert not a["train"].equals(generate(SyntheticTaskSpec(family=family, train_size=50, val_size=20,
                                                             test_size=20, image_size=8, seed=1))["train"])


def test_splits_draw_from_distinct_streams():
    spec = SyntheticTaskSpec(train_size=30, val_size=30, test_size=30, image_size=8)
    d = generate(spec)
    assert not np.array_equal(d["train"].images, d["val"].images)
    assert not np.array_equal(d["val"].images, d["test"].images)


def test_pretrain_task_uses_a_different_family():
    adapt = SyntheticTaskSpec()
    pre = pretrain_spec(adapt)
    assert pre.family != adapt.family and pre.seed != adapt.seed
    assert pretrain_spec(SyntheticTaskSpec(family="blobs")).family != "blobs"


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticTaskSpec(num_classes=1)
    with pytest.raises(ValueError):
        SyntheticTaskSpec(family="plaid")
    with pytest.raises(ValueError):
        SyntheticTaskSpec.from_dict({"colour": 1})


def test_normalization_to_unit_interval():
    d = generate(SyntheticTaskSpec(train_size=20, val_size=4, test_size=4, image_size=8))["train"]
    x = d.normalized()
    assert x.dtype == np.float32 and x.min() >= 0.0 and x.max() <= 1.0


def test_linear_probe_learns_four_class_stripes():
    spec = SyntheticTaskSpec(num_classes=4, train_size=400, val_size=20, test_size=400, image_size=16)
    d = generate(spec)
    x, y = d["train"].normalized().reshape(400, -1).astype(np.float64), d["train"].int_labels()
    xt, yt = d["test"].normalized().reshape(400, -1).astype(np.float64), d["test"].int_labels()
    mu = x.mean(0)
    x, xt = x - mu, xt - mu
    targets = np.eye(4)[y]
    w = np.linalg.solve(x.T @ x + 10.0 * np.eye(x.shape[1]), x.T @ targets)
    acc = float(np.mean(np.argmax(xt @ w, axis=1) == yt))
    assert acc > 0.5


def test_raw_round_trip(tmp_path):
    d = generate(SyntheticTaskSpec(train_size=12, val_size=2, test_size=2, image_size=8))["train"]
    path = tmp_path / "train.hlds"
    save_raw(d, path)
    back = load_raw(path)
    assert back.equals(d)
    save_raw(back, tmp_path / "again.hlds")
    assert path.read_bytes() == (tmp_path / "again.hlds").read_bytes()


def test_sixteen_bit_labels_round_trip(tmp_path):
    d = RawDataset(np.zeros((3, 1, 2, 2), np.uint8), np.array([0, 300, 65535], dtype=np.uint16))
    save_raw(d, tmp_path / "x.hlds")
    back = load_raw(tmp_path / "x.hlds")
    assert back.labels.dtype == np.uint16 and back.equals(d)


def test_empty_dataset_is_valid(tmp_path):
    d = RawDataset(np.zeros((0, 3, 4, 4), np.uint8), np.zeros(0, np.uint8))
    save_raw(d, tmp_path / "e.hlds")
    back = load_raw(tmp_path / "e.hlds")
    assert len(back) == 0 and back.images.shape == (0, 3, 4, 4)


def test_format_errors_name_offsets(tmp_path):
    d = RawDataset(np.ones((2, 1, 2, 2), np.uint8), np.array([1, 2], np.uint8))
    path = tmp_path / "d.hlds"
    save_raw(d, path)
    raw = path.read_bytes()
    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(DatasetFormatError) as e:
        load_raw(tmp_path / "magic")
    assert e.value.offset == 0
    (tmp_path / "trunc").write_bytes(raw[:-1])
    with pytest.raises(DatasetFormatError) as e:
        load_raw(tmp_path / "trunc")
    assert e.value.offset == len(raw) - 1
    (tmp_path / "hdr").write_bytes(raw[:7])
    with pytest.raises(DatasetFormatError) as e:
        load_raw(tmp_path / "hdr")
    assert e.value.offset == 7 and "offset 7" in str(e.value)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 6), st.integers(1, 3), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_raw_round_trip_property(count, ch, h, w, seed):
    import tempfile
    from pathlib import Path

    rng = np.random.default_rng(seed)
    d = RawDataset(rng.integers(0, 256, (count, ch, h, w), dtype=np.uint8),
                   rng.integers(0, 256, count).astype(np.uint8))
    with tempfile.TemporaryDirectory() as tmp:
        p = Path(tmp) / "p.hlds"
        save_raw(d, p)
        assert load_raw(p).equals(d)
        assert p.stat().st_size == 16 + count * ch * h * w + count


def test_bad_label_width_points_at_its_header_byte(tmp_path):
    d = RawDataset(np.ones((1, 1, 1, 1), np.uint8), np.array([1], np.uint8))
    save_raw(d, tmp_path / "d.hlds")
    raw = bytearray((tmp_path / "d.hlds").read_bytes())
    raw[15] = 3
    (tmp_path / "bad").write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError) as e:
        load_raw(tmp_path / "bad")
    assert e.value.offset == 15
