import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densegrade.augmentation import (
    AugmentationPolicy, SampledTransform, apply_transform, augment_batch, augment_sample,
    sample_stream, sample_transform,
)


def oracle_warp(img, t, fill="nearest", cval=0.0):
    """Per-pixel inverse mapping written straight from the composition rule."""
    c, h, w = img.shape
    src = img[:, :, ::-1] if t.hflip else img
    src = src[:, ::-1, :] if t.vflip else src
    cx, cy = (w - 1) / 2, (h - 1) / 2
    a, s = math.radians(t.angle_deg), math.radians(t.shear_deg)
    out = np.zeros_like(img, dtype=np.float64)
    for y in range(h):
        for x in range(w):
            # undo shift, then shear, then rotation
            u = x - cx - t.shift_x * w
            v = y - cy - t.shift_y * h
            v = v / math.cos(s)
            u = u + math.sin(s) * v
            px = math.cos(a) * u + math.sin(a) * v + cx
            py = -math.sin(a) * u + math.cos(a) * v + cy
            for ch in range(c):
                out[ch, y, x] = _sample(src[ch], px, py, fill, cval)
    return out


def _sample(plane, px, py, fill, cval):
    h, w = plane.shape
    x0, y0 = math.floor(px), math.floor(py)
    total = 0.0
    for yy, wy in ((y0, 1 - (py - y0)), (y0 + 1, py - y0)):
        for xx, wx in ((x0, 1 - (px - x0)), (x0 + 1, px - x0)):
            if fill == "nearest":
                v = plane[min(max(yy, 0), h - 1), min(max(xx, 0), w - 1)]
            else:
                v = plane[yy, xx] if 0 <= yy < h and 0 <= xx < w else cval
            total += wy * wx * v
    return total


def test_zero_policy_gives_identity_every_draw():
    p = AugmentationPolicy.none()
    rng = np.random.default_rng(0)
    for _ in range(100):
        t = sample_transform(p, rng)
        assert t.is_identity()
        np.testing.assert_array_equal(t.matrix(7, 9), [[1, 0, 0], [0, 1, 0]])


def test_rotation_monte_carlo():
    p = AugmentationPolicy(rotation_max_deg=30.0)
    rng = np.random.default_rng(1)
    angles = np.array([sample_transform(p, rng).angle_deg for _ in range(10_000)])
    assert abs(angles.mean()) < 1.0 and np.abs(angles).max() <= 30.0
    assert angles.std() == pytest.approx(30 / math.sqrt(3), rel=0.03)


def test_other_parameters_monte_carlo():
    p = AugmentationPolicy()
    rng = np.random.default_rng(2)
    draws = [sample_transform(p, rng) for _ in range(10_000)]
    shear = np.array([d.shear_deg for d in draws])
    sx = np.array([d.shift_x for d in draws])
    hf = np.mean([d.hflip for d in draws])
    vf = np.mean([d.vflip for d in draws])
    assert np.abs(shear).max() <= 15 and abs(shear.mean()) < 0.5
    assert np.abs(sx).max() <= 0.1 and abs(sx.mean()) < 0.005
    assert abs(hf - 0.5) < 0.02 and abs(vf - 0.5) < 0.02


def test_same_stream_same_transform():
    p = AugmentationPolicy()
    assert sample_transform(p, sample_stream(3, 4, 5)) == sample_transform(p, sample_stream(3, 4, 5))
    assert sample_transform(p, sample_stream(3, 4, 5)) != sample_transform(p, sample_stream(3, 5, 5))


def test_identity_transform_is_bitwise():
    img = np.random.default_rng(0).random((3, 6, 5)).astype(np.float32)
    out = apply_transform(img, SampledTransform.identity())
    assert out.dtype == img.dtype and np.array_equal(out, img)


def test_hflip_example_and_involution():
    img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    t = SampledTransform(0, 0, 0, 0, True, False)
    once = apply_transform(img, t)
    assert once.tolist() == [[[2.0, 1.0], [4.0, 3.0]]]
    assert np.array_equal(apply_transform(once, t), img)
    v = SampledTransform(0, 0, 0, 0, False, True)
    assert np.array_equal(apply_transform(apply_transform(img, v), v), img)


def test_rot90_matches_oracle_and_exact_permutation():
    img = np.arange(25, dtype=np.float64).reshape(1, 5, 5) ** 1.5  # asymmetric
    t = SampledTransform(90.0, 0, 0, 0, False, False)
    out = apply_transform(img, t)
    np.testing.assert_allclose(out, oracle_warp(img, t), atol=1e-6)
    # a quarter turn about the centre is a pure pixel permutation
    np.testing.assert_allclose(out[0], np.rot90(img[0], k=-1), atol=1e-6)


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("fill", ["nearest", "constant"])
def test_random_transforms_match_oracle(seed, fill):
    rng = np.random.default_rng(seed)
    img = rng.random((2, int(rng.integers(4, 9)), int(rng.integers(4, 9))))
    p = AugmentationPolicy(fill_mode=fill, fill_value=0.3)
    t = sample_transform(p, rng)
    np.testing.assert_allclose(apply_transform(img, t, p), oracle_warp(img, t, fill, 0.3), atol=1e-9)


def test_degenerate_and_tiny_images_rejected():
    with pytest.raises(ValueError):
        apply_transform(np.zeros((1, 5, 5)), SampledTransform(0, 90.0, 0, 0, False, False))
    with pytest.raises(ValueError):
        apply_transform(np.zeros((1, 1, 5)), SampledTransform(10, 0, 0, 0, False, False))


def test_policy_validation():
    for bad in (dict(rotation_max_deg=-1), dict(width_shift_frac=1.0), dict(hflip_prob=1.5),
                dict(fill_mode="wrap"), dict(interpolation="cubic")):
        with pytest.raises(ValueError):
            AugmentationPolicy(**bad).validate()


def test_keyed_determinism_independent_of_batching():
    rng = np.random.default_rng(0)
    imgs = rng.random((6, 3, 10, 10)).astype(np.float32)
    labels = np.arange(6)
    idx = np.array([10, 3, 7, 22, 0, 5])
    p = AugmentationPolicy()
    whole, lab = augment_batch(imgs, labels, p, 1, 2, idx)
    assert lab is labels
    again, _ = augment_batch(imgs, labels, p, 1, 2, idx)
    assert np.array_equal(whole, again)
    parts = [augment_batch(imgs[s:s + 2], labels[s:s + 2], p, 1, 2, idx[s:s + 2])[0] for s in (0, 2, 4)]
    assert np.array_equal(np.concatenate(parts), whole)
    rev, _ = augment_batch(imgs[::-1], labels[::-1], p, 1, 2, idx[::-1])
    assert np.array_equal(rev[::-1], whole)


def test_epoch_variation_monte_carlo():
    img = np.random.default_rng(0).random((3, 12, 12)).astype(np.float32)
    p = AugmentationPolicy()
    differ = sum(not np.array_equal(augment_sample(img, p, 0, 1, i), augment_sample(img, p, 0, 2, i))
                 for i in range(500))
    assert differ / 500 >= 0.99


def test_zero_policy_batch_identity():
    imgs = np.random.default_rng(0).random((3, 3, 8, 8))
    out, _ = augment_batch(imgs, [0, 1, 2], AugmentationPolicy.none(), 0, 1, [0, 1, 2])
    assert np.array_equal(out, imgs)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), h=st.integers(2, 12), w=st.integers(2, 12),
       lo=st.floats(-5, 5), span=st.floats(0.01, 10))
def test_range_preserved_with_nearest_fill(seed, h, w, lo, span):
    rng = np.random.default_rng(seed)
    img = lo + span * rng.random((2, h, w))
    t = sample_transform(AugmentationPolicy(), rng)
    out = apply_transform(img, t)
    assert out.shape == img.shape
    assert out.min() >= img.min() - 1e-6 and out.max() <= img.max() + 1e-6


def test_matrix_is_invertible_for_in_range_draws():
    rng = np.random.default_rng(4)
    p = AugmentationPolicy()
    for _ in range(1000):
        m = sample_transform(p, rng).matrix(32, 32)
        assert abs(np.linalg.det(m[:, :2])) > 0.5
