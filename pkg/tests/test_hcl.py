import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dhcnet import hcl


def test_region_448_quarter():
    r = hcl.select_region(448, 448, 0.25, np.random.default_rng(0), m=3)
    assert (r.side_h, r.side_w) == (224, 224)


def test_region_full_image():
    r = hcl.select_region(64, 64, 1.0, np.random.default_rng(0), m=3)
    assert (r.side_h, r.side_w, r.top, r.left) == (64, 64, 0, 0)


def test_region_64_divisible():
    r = hcl.select_region(64, 64, 0.25, np.random.default_rng(0), m=3)
    assert (r.side_h, r.side_w) == (32, 32) and r.side_h % 8 == 0


def test_region_sigma_range():
    for bad in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            hcl.select_region(64, 64, bad, np.random.default_rng(0))


def test_region_corner_anchoring():
    for corner in hcl.CORNERS:
        r = hcl.select_region(64, 48, 0.25, np.random.default_rng(0), m=2, corner=corner)
        ys, xs = r.slices
        assert ys.start in (0,) or ys.stop == 64
        assert xs.start in (0,) or xs.stop == 48
        assert (ys.start == 0) == corner.startswith("top")
        assert (xs.start == 0) == corner.endswith("left")


def test_region_corner_is_uniform():
    rng = np.random.default_rng(0)
    counts = {c: 0 for c in hcl.CORNERS}
    for _ in range(4000):
        counts[hcl.select_region(64, 64, 0.25, rng).corner] += 1
    assert all(900 < v < 1100 for v in counts.values())


def test_region_area_fraction():
    r = hcl.select_region(448, 448, 0.5, np.random.default_rng(0), m=3)
    assert abs(r.side_h * r.side_w / 448 ** 2 - 0.5) < 0.05


def test_identity_permutation_is_identity(rng):
    img = rng.uniform(size=(3, 64, 64))
    r = hcl.select_region(64, 64, 0.25, rng)
    out, _ = hcl.shuffle_region(img, r, 4, permutation=np.arange(16))
    assert out.tobytes() == img.tobytes()


def test_patch_geometry_224():
    img = np.zeros((3, 448, 448))
    r = hcl.select_region(448, 448, 0.25, np.random.default_rng(0), m=3)
    patches = hcl.split_patches(img[:, r.slices[0], r.slices[1]], 8)
    assert patches.shape == (64, 3, 28, 28)


def test_indivisible_region():
    r = hcl.RegionSpec("top-left", 12, 12, 0.25, 24, 24)
    with pytest.raises(ValueError, match="divisible"):
        hcl.shuffle_region(np.zeros((3, 24, 24)), r, 8, np.random.default_rng(0))


def test_permutation_moves_whole_patches():
    img = np.arange(16.0).reshape(1, 4, 4)
    r = hcl.RegionSpec("top-left", 4, 4, 1.0, 4, 4)
    out, _ = hcl.shuffle_region(img, r, 2, permutation=[3, 2, 1, 0])
    np.testing.assert_array_equal(out[0], [[10, 11, 8, 9], [14, 15, 12, 13], [2, 3, 0, 1], [6, 7, 4, 5]])


@pytest.mark.parametrize("m,expected", [
    (3, [(1, 2, 2), (2, 4, 3), (3, 8, 4)]),
    (6, [(1, 2, 2), (2, 4, 2), (3, 8, 3), (4, 16, 3), (5, 32, 4), (6, 64, 4)]),
    (4, [(1, 2, 2), (2, 4, 2), (3, 8, 3), (4, 16, 4)]),
    (5, [(1, 2, 2), (2, 4, 2), (3, 8, 3), (4, 16, 3), (5, 32, 4)]),
])
def test_granularity_schedule(m, expected):
    assert hcl.granularity_schedule(m, 4) == expected


@pytest.mark.parametrize("m", [1, 2])
def test_granularity_schedule_empty_interval(m):
    with pytest.raises(ValueError, match="empty"):
        hcl.granularity_schedule(m, 4)


def test_schedule_deterministic_and_sorted():
    for m in range(3, 10):
        a = hcl.granularity_schedule(m, 4)
        assert a == hcl.granularity_schedule(m, 4)
        assert [k for k, _, _ in a] == list(range(1, m + 1))
        assert [s for _, _, s in a] == sorted(s for _, _, s in a)


def test_augment_set_invariants(rng):
    img = rng.uniform(size=(3, 64, 64))
    aug = hcl.augment(img, 7, 0.25, 3, rng)
    assert [(e.k, e.n, e.target_last_stage) for e in aug.entries] == [(1, 2, 2), (2, 4, 3), (3, 8, 4)]
    regions = {e.region for e in aug.entries}
    assert len(regions) == 1
    for e in aug.entries:
        assert sorted(e.permutation.tolist()) == list(range(e.n ** 2))
        mask = np.ones((64, 64), bool)
        mask[e.region.slices] = False
        assert e.image[:, mask].tobytes() == img[:, mask].tobytes()


def test_independent_regions_flag():
    img = np.zeros((3, 64, 64))
    corners = set()
    rng = np.random.default_rng(3)
    for _ in range(20):
        corners |= {e.region.corner for e in hcl.augment(img, 0, 0.25, 3, rng, independent_regions=True).entries}
    assert len(corners) > 1


def test_mixup_examples(rng):
    a, b = rng.uniform(size=(3, 4, 4)), rng.uniform(size=(3, 4, 4))
    ea, eb = np.eye(5)[0], np.eye(5)[1]
    img, lab = hcl.mixup(a, b, ea, eb, 1.0)
    np.testing.assert_array_equal(img, a)
    np.testing.assert_array_equal(lab, ea)
    _, lab = hcl.mixup(a, b, ea, eb, 0.5)
    np.testing.assert_array_equal(lab, [0.5, 0.5, 0, 0, 0])
    with pytest.raises(ValueError):
        hcl.mixup(a, b[:, :2], ea, eb, 0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 2 ** 31))
def test_mixup_convexity(lam, seed):
    r = np.random.default_rng(seed)
    a, b = r.uniform(-2, 2, size=(3, 4, 4)), r.uniform(-2, 2, size=(3, 4, 4))
    img, _ = hcl.mixup(a, b, np.eye(2)[0], np.eye(2)[1], lam)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    assert np.all(img >= lo - 1e-12) and np.all(img <= hi + 1e-12)
