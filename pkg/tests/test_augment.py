import numpy as np
import pytest
from hypothesis import given, strategies as st

from glioma_mtl.augment import (AugmentConfig, augment_epoch_stream, augment_sample,
                                brightness_shift, contrast_shift, random_crop, random_rotate,
                                rotate, scale_contrast)
from glioma_mtl.data_model import Sample, index_labelset
from glioma_mtl.errors import AugmentError


class StubRng:
    """Replays fixed integers / uniforms in call order."""

    def __init__(self, integers=(), uniforms=()):
        self._ints = list(integers)
        self._unis = list(uniforms)

    def integers(self, lo, hi=None):
        return self._ints.pop(0)

    def uniform(self, lo=0.0, hi=1.0, size=None):
        if size is None:
            return self._unis.pop(0)
        return np.array([self._unis.pop(0) for _ in range(size)])


def _sample(shape=(9, 9, 9), seed=0, case_id="s"):
    g = np.random.default_rng(seed)
    image = g.random((4,) + shape).astype(np.float32) + 0.5
    mask = (g.random(shape) < 0.3).astype(np.uint8)
    return Sample(case_id, image, index_labelset(0, 1, 2), mask)


def crop_oracle(array, amounts):
    """Independent zero-fill: ``amounts[axis] = (before, after)``."""
    out = array.copy()
    for axis, (before, after) in enumerate(amounts):
        idx = [slice(None)] * out.ndim
        idx[axis] = slice(0, before)
        out[tuple(idx)] = 0
        idx[axis] = slice(out.shape[axis] - after, out.shape[axis])
        out[tuple(idx)] = 0
    return out


def test_crop_zero_amount_is_identity():
    s = _sample()
    out = random_crop(s, StubRng([0, 0, 0, 0, 0, 0]), crop_max=3)
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


@given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 4), st.integers(0, 2**31 - 1))
def test_crop_matches_oracle(k0, k1, k2, seed):
    g = np.random.default_rng(seed)
    splits = [int(g.integers(0, k + 1)) for k in (k0, k1, k2)]
    ints = [v for pair in zip((k0, k1, k2), splits) for v in pair]
    s = _sample(seed=seed % 1000)
    out = random_crop(s, StubRng(ints), crop_max=4)
    amounts = [(b, k - b) for k, b in zip((k0, k1, k2), splits)]
    assert np.array_equal(out.mask, crop_oracle(s.mask, amounts))
    for c in range(4):
        assert np.array_equal(out.image[c], crop_oracle(s.image[c], amounts))
    # the zeroed region is shared exactly between channels and mask
    ones = Sample("o", np.ones_like(s.image), s.labels, np.ones_like(s.mask))
    o = random_crop(ones, StubRng(ints), crop_max=4)
    assert all(np.array_equal(o.image[c] == 0, o.mask == 0) for c in range(4))


def test_crop_too_small_dimension():
    with pytest.raises(AugmentError):
        random_crop(_sample((9, 9, 9)), np.random.default_rng(0), crop_max=5)


def test_rotate_zero_is_identity():
    s = _sample()
    out = rotate(s, (0.0, 0.0, 0.0))
    assert np.allclose(out.image, s.image, atol=1e-6)
    out = random_rotate(s, StubRng(uniforms=[0.0, 0.0, 0.0]))
    assert np.allclose(out.image, s.image, atol=1e-6)


@pytest.mark.parametrize("angles, axes", [((0, 0, 90), (0, 1)), ((90, 0, 0), (1, 2)),
                                          ((0, 90, 0), (2, 0))])
def test_rotate_quarter_turn_is_axis_permutation(angles, axes):
    # rotating by +90 about one axis carries the first in-plane axis onto the second
    s = _sample((7, 7, 7))
    out = rotate(s, angles)
    expected = np.stack([np.rot90(c, 1, axes=axes) for c in s.image])
    assert np.allclose(out.image, expected, atol=1e-5)
    assert np.array_equal(out.mask, np.rot90(s.mask, 1, axes=axes))


def test_rotated_mask_stays_binary():
    out = random_rotate(_sample(), np.random.default_rng(5), 30.0)
    assert set(np.unique(out.mask)) <= {0, 1}


def test_brightness_shift():
    v = np.linspace(-1, 1, 27).reshape(3, 3, 3)
    assert np.array_equal(brightness_shift(v, StubRng(uniforms=[0.0])), v)
    assert np.allclose(brightness_shift(v, StubRng(uniforms=[0.2])) - v, 0.2)


def test_contrast_shift():
    v = np.array([-1.0, 0.0, 1.0]).reshape(1, 1, 3)
    assert np.array_equal(contrast_shift(v, StubRng(uniforms=[1.0])), v)
    assert np.allclose(scale_contrast(v, 1.15).ravel(), [-1.15, 0.0, 1.15])
    w = v + 5
    assert np.allclose(scale_contrast(w, 0.85).mean(), 5.0)


def test_intensity_augmentation_leaves_mask():
    s = _sample()
    cfg = AugmentConfig(probability=1.0, crop_max=0, rotation_max_deg=0.0)
    out = augment_sample(s, np.random.default_rng(2), cfg)
    assert np.array_equal(out.mask, s.mask)
    assert not np.array_equal(out.image, s.image)


def test_stream_factor_two():
    data = [_sample((4, 4, 4), i, f"c{i}") for i in range(10)]
    stream = list(augment_epoch_stream(data, AugmentConfig(probability=0.3, factor=2,
                                                           crop_max=1)))
    assert len(stream) == 20
    ids = [s.case_id for s in stream]
    assert all(ids.count(f"c{i}") == 2 for i in range(10))


def test_stream_probability_zero_is_exact():
    data = [_sample((4, 4, 4), i, f"c{i}") for i in range(5)]
    stream = list(augment_epoch_stream(data, AugmentConfig(probability=0.0, factor=1)))
    assert sorted(s.case_id for s in stream) == [d.case_id for d in data]
    by_id = {d.case_id: d for d in data}
    assert all(s is by_id[s.case_id] for s in stream)


def test_stream_is_reproducible():
    data = [_sample((5, 5, 5), i, f"c{i}") for i in range(6)]
    cfg = AugmentConfig(probability=0.5, factor=2, crop_max=1, seed=7)
    a = list(augment_epoch_stream(data, cfg, epoch=3))
    b = list(augment_epoch_stream(data, cfg, epoch=3))
    assert [s.case_id for s in a] == [s.case_id for s in b]
    assert all(np.array_equal(x.image, y.image) for x, y in zip(a, b))


def test_config_invariants():
    with pytest.raises(AugmentError):
        AugmentConfig(probability=1.5)
    with pytest.raises(AugmentError):
        AugmentConfig(factor=0)
    with pytest.raises(AugmentError):
        AugmentConfig(crop_max=-1)
