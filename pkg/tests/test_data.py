import numpy as np
import pytest

from medusa import archive
from medusa.data import (
    FAR_DEPTH,
    SceneSpec,
    dataset,
    edges_from_segmentation,
    generate_sample,
    load_sample,
    validate_sample,
)
from medusa.errors import InvalidArgumentError
from medusa.tasks import NUM_CLASSES, NUM_PARTS


def edges_by_loop(seg):
    """Direct 4-neighbour scan, written independently of the library helper."""
    h, w = seg.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                yy, xx = y + dy, x + dx
                if 0 <= yy < h and 0 <= xx < w and seg[yy, xx] != seg[y, x]:
                    out[y, x] = 1
    return out


def test_deterministic():
    spec = SceneSpec(seed=3)
    a, b = generate_sample(spec, 11), generate_sample(spec, 11)
    for key, value in a.arrays().items():
        assert value.tobytes() == b.arrays()[key].tobytes(), key


def test_seed_and_index_change_sample():
    a = generate_sample(SceneSpec(seed=0), 0)
    assert not np.array_equal(a.image, generate_sample(SceneSpec(seed=1), 0).image)
    assert not np.array_equal(a.image, generate_sample(SceneSpec(seed=0), 1).image)


def test_shapes_and_ranges():
    s = generate_sample(SceneSpec(), 0)
    assert s.image.shape == (3, 64, 64)
    assert s.depth.shape == s.edges.shape == s.saliency.shape == (1, 64, 64)
    assert s.normals.shape == (3, 64, 64)
    assert s.segmentation.shape == s.parts.shape == (64, 64)
    assert 0 <= s.image.min() and s.image.max() <= 1
    assert 0.1 < s.depth.min() and s.depth.max() <= FAR_DEPTH
    assert s.segmentation.max() < NUM_CLASSES and s.parts.max() < NUM_PARTS


def test_empty_scene():
    s = generate_sample(SceneSpec(min_shapes=0, max_shapes=0), 5)
    assert np.all(s.depth == FAR_DEPTH)
    assert np.all(s.segmentation == 0)
    assert not s.edges.any() and not s.saliency.any()
    assert validate_sample(s) == []


def test_edges_match_loop_oracle():
    for i in range(5):
        s = generate_sample(SceneSpec(seed=2), i)
        np.testing.assert_array_equal(s.edges[0], edges_by_loop(s.segmentation))
        np.testing.assert_array_equal(edges_from_segmentation(s.segmentation), edges_by_loop(s.segmentation))


def test_validator_passes_sweep():
    spec = SceneSpec(seed=1)
    for i in range(200):
        assert validate_sample(generate_sample(spec, i)) == [], i


def test_validator_catches_corruption():
    s = generate_sample(SceneSpec(), 4)
    s.normals[:, 3, 3] *= 1.1
    assert validate_sample(s)
    s = generate_sample(SceneSpec(), 4)
    s.edges[0, 0, 0] = 1 - s.edges[0, 0, 0]
    assert validate_sample(s)
    s = generate_sample(SceneSpec(), 4)
    s.saliency[:] = 0
    if s.segmentation.any():
        assert validate_sample(s)


def test_splits_disjoint_and_ordered():
    ds = dataset(SceneSpec(), 10, 4, 3)
    assert list(ds.train) == list(range(10))
    assert list(ds.val) == list(range(10, 14))
    assert list(ds.test) == list(range(14, 17))
    assert not set(ds.train) & set(ds.val) and not set(ds.val) & set(ds.test)
    batch = ds.load("val")
    assert batch["image"].shape == (4, 3, 64, 64)
    np.testing.assert_array_equal(batch["depth"][0], generate_sample(SceneSpec(), 10).depth)
    with pytest.raises(InvalidArgumentError):
        dataset(SceneSpec(), 0, 1, 1)
    with pytest.raises(InvalidArgumentError):
        ds.split("holdout")


def test_cache_round_trip_bit_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("MEDUSA_DATA_CACHE", str(tmp_path))
    spec = SceneSpec(seed=9)
    first = load_sample(spec, 2)
    files = list(tmp_path.rglob("*.mda"))
    assert len(files) == 1 and (files[0].parent / "spec.json").exists()
    cached = load_sample(spec, 2)
    fresh = generate_sample(spec, 2)
    arrays, meta = archive.load(files[0])
    assert meta["index"] == 2
    for key, value in fresh.arrays().items():
        assert value.tobytes() == cached.arrays()[key].tobytes() == first.arrays()[key].tobytes()
        assert arrays[key].dtype.str == "<f8" or arrays[key].dtype == value.dtype


def test_bad_spec():
    with pytest.raises(InvalidArgumentError):
        SceneSpec(min_shapes=3, max_shapes=2)
