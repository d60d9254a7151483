import json

import numpy as np
import pytest
from scipy import ndimage

from gigp.data import (PhantomSpec, Volume, augment, generate_phantom,
                       load_volume, normalize_intensities, save_volume,
                       split_dataset)


def test_volume_label_shape_check():
    with pytest.raises(ValueError):
        Volume(np.zeros((4, 4, 4)), label=np.zeros((3, 3, 3)))


def test_phantom_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(grid_size=16, semi_axes_range=(5.0, 8.0),
                    center_jitter=2.0, margin=2).validate()
    PhantomSpec().validate()


def test_generate_phantom_reproducible():
    spec = PhantomSpec()
    a = generate_phantom(spec, np.random.default_rng(7), vol_id="a")
    b = generate_phantom(spec, np.random.default_rng(7), vol_id="a")
    assert np.array_equal(a.intensities, b.intensities)
    assert np.array_equal(a.label, b.label)
    c = generate_phantom(spec, np.random.default_rng(8))
    assert not np.array_equal(a.label, c.label)


def test_phantom_basic_properties():
    v = generate_phantom(PhantomSpec(), np.random.default_rng(0), vol_id="x")
    assert v.shape == (24, 24, 24)
    assert set(np.unique(v.label)) <= {0, 1}
    assert 0 < v.label.sum() < v.label.size
    # foreground is a single connected blob
    _, n_components = ndimage.label(v.label)
    assert n_components == 1


def test_normalize_intensities_statistics():
    rng = np.random.default_rng(1)
    out = normalize_intensities(rng.standard_normal((8, 8, 8)) * 7 + 3)
    assert abs(out.mean()) < 1e-12
    assert abs(out.std() - 1.0) < 1e-12


def test_split_dataset_partition():
    ids = [f"v{i:02d}" for i in range(40)]
    split = split_dataset(ids, num_labeled=4, seed=0)
    assert len(split["labeled"]) == 4
    assert len(split["val"]) == 8
    assert len(split["test"]) == 12
    assert len(split["unlabeled"]) == 16
    combined = sum(split.values(), [])
    assert sorted(combined) == sorted(ids)
    assert split == split_dataset(ids, num_labeled=4, seed=0)
    assert split != split_dataset(ids, num_labeled=4, seed=1)


def test_split_dataset_too_small():
    with pytest.raises(ValueError):
        split_dataset([f"v{i}" for i in range(20)], num_labeled=4, seed=0)


def test_augment_keeps_label_aligned():
    rng = np.random.default_rng(2)
    v = generate_phantom(PhantomSpec(), np.random.default_rng(3), vol_id="x")
    for _ in range(10):
        out = augment(v, rng)
        assert out.shape == v.shape
        assert set(np.unique(out.label)) <= {0, 1}
        # the blob survives the transform and stays one connected component
        assert out.label.sum() > 0
        _, n = ndimage.label(out.label)
        assert n == 1


def test_augment_seeded_reproducibility():
    v = generate_phantom(PhantomSpec(), np.random.default_rng(4), vol_id="x")
    a = augment(v, np.random.default_rng(5))
    b = augment(v, np.random.default_rng(5))
    assert np.array_equal(a.intensities, b.intensities)
    assert np.array_equal(a.label, b.label)


def test_augment_crop():
    v = generate_phantom(PhantomSpec(), np.random.default_rng(6), vol_id="x")
    out = augment(v, np.random.default_rng(0), crop_size=16)
    assert out.shape == (16, 16, 16)
    with pytest.raises(ValueError):
        augment(v, np.random.default_rng(0), crop_size=200)


def test_volume_roundtrip(tmp_path):
    v = generate_phantom(PhantomSpec(grid_size=16, semi_axes_range=(3.0, 4.0),
                                     center_jitter=1.0),
                         np.random.default_rng(7), vol_id="rt")
    path = tmp_path / "v.vol"
    save_volume(v, path)
    back = load_volume(path)
    assert back.id == "rt"
    assert back.spacing == v.spacing
    # storage is little-endian float32
    assert np.array_equal(back.intensities, v.intensities.astype("<f4"))
    assert np.array_equal(back.label, v.label)


def test_volume_roundtrip_without_label(tmp_path):
    v = Volume(np.random.default_rng(8).standard_normal((5, 6, 7)))
    path = tmp_path / "nolabel.vol"
    save_volume(v, path)
    assert load_volume(path).label is None


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.vol"
    header = {"magic": "not-a-volume", "dims": [2, 2, 2],
              "spacing": [1, 1, 1], "has_label": False, "id": ""}
    path.write_bytes(json.dumps(header).encode() + b"\n" + b"\0" * 32)
    with pytest.raises(ValueError, match="magic"):
        load_volume(path)


def test_load_rejects_unparseable_header(tmp_path):
    path = tmp_path / "garbage.vol"
    path.write_bytes(b"\xff\xfe\x00 not json\n")
    with pytest.raises(ValueError, match="header"):
        load_volume(path)


def test_load_rejects_truncated_payload(tmp_path):
    v = Volume(np.zeros((4, 4, 4)), label=np.zeros((4, 4, 4)))
    path = tmp_path / "trunc.vol"
    save_volume(v, path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(ValueError, match="payload"):
        load_volume(path)


def test_load_rejects_trailing_bytes(tmp_path):
    v = Volume(np.zeros((3, 3, 3)))
    path = tmp_path / "extra.vol"
    save_volume(v, path)
    path.write_bytes(path.read_bytes() + b"x")
    with pytest.raises(ValueError, match="trailing"):
        load_volume(path)
