from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kitseg.exceptions import EmptyGroupError, LabelError, ShapeError
from kitseg.preprocess import (AugmentationPolicy, BalancedSampler, PreprocessConfig, Slab,
                               VolumePreprocessor, augment, batch_composition, classify_group,
                               downsample_xy, hu_window, make_slab, parse_key_values, read_config,
                               reslice_z, sample_batch, stack_25d, standardize, standardized_value,
                               upsample_labels_xy)
from kitseg.volume_io import LabelVolume, Volume, generate_phantom, random_phantom_spec


# ------------------------------------------------------------- reslicing

def test_reslice_constant_volume():
    v = Volume(np.full((17, 4, 5), 42.0), (1, 1, 1.25))
    for t in (0.5, 3.0, 7.0):
        out = reslice_z(v, t)
        assert np.all(out.data == 42.0)
        assert out.spacing[2] == t
        assert out.shape[0] == max(1, round(17 * 1.25 / t))


def test_reslice_linear_ramp_is_exact():
    nz, sz = 60, 1.5
    ramp = (np.arange(nz) * sz)[:, None, None] * np.ones((1, 3, 3))
    out = reslice_z(Volume(ramp, (1, 1, sz)), 3.0)
    assert out.shape[0] == 30
    expected = np.arange(30) * 3.0
    assert np.max(np.abs(out.data[:, 1, 1] - expected)) < 1e-5


def test_reslice_identity_at_target():
    v = Volume(np.random.default_rng(0).standard_normal((7, 3, 3)), (1, 1, 3.0))
    assert reslice_z(v, 3.0).data.tobytes() == v.data.tobytes()


def test_reslice_labels_nearest():
    lab = LabelVolume(np.repeat(np.array([0, 1, 2, 1], np.uint8), 9).reshape(4, 3, 3), (1, 1, 3.0))
    out = reslice_z(lab, 1.0)
    assert out.shape[0] == 12
    assert set(np.unique(out.data)) <= {0, 1, 2}
    np.testing.assert_array_equal(out.data[:, 0, 0], [0, 0, 1, 1, 1, 2, 2, 2, 1, 1, 1, 1])


def test_reslice_explicit_slice_count():
    v = Volume(np.zeros((30, 2, 2)), (1, 1, 3.0))
    assert reslice_z(v, 1.5, nz=61).shape[0] == 61


# -------------------------------------------------- windowing, standardize

def test_hu_window_values():
    v = Volume(np.array([-100.0, 500.0, 120.0]).reshape(1, 1, 3), (1, 1, 1))
    np.testing.assert_array_equal(hu_window(v).data.ravel(), [-30, 300, 120])


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_hu_window_idempotent_and_in_range(seed):
    v = Volume(np.random.default_rng(seed).uniform(-2000, 2000, (3, 4, 4)), (1, 1, 1))
    once = hu_window(v, -30, 300)
    assert once == hu_window(once, -30, 300)
    assert once.data.min() >= -30 and once.data.max() <= 300


def test_standardize_two_values():
    out = standardize(Volume(np.array([1.0, 3.0]).reshape(1, 1, 2), (1, 1, 1)))
    np.testing.assert_allclose(out.data.ravel(), [-1, 1], atol=1e-6)


def test_standardize_constant_gives_zeros():
    assert not standardize(Volume(np.full((2, 2, 2), 5.0), (1, 1, 1))).data.any()


@pytest.mark.parametrize("seed", range(5))
def test_standardize_statistics(seed):
    v = Volume(np.random.default_rng(seed).normal(40, 90, (20, 32, 32)), (1, 1, 1))
    out = standardize(hu_window(v)).data.astype(np.float64)
    assert abs(out.mean()) < 1e-5
    assert abs(out.std() - 1) < 1e-5


def test_preprocessor_chain_deterministic():
    v, lab = generate_phantom(random_phantom_spec(2))
    pre = VolumePreprocessor().fit()
    a, b = pre.transform(v), pre.transform(v)
    assert a.data.tobytes() == b.data.tobytes()
    assert a.spacing == (1.0, 1.0, 3.0)
    assert pre.transform_labels(lab).shape == a.shape
    assert pre.get_params() == {"thickness": 3.0, "hu_min": -30.0, "hu_max": 300.0}


def test_preprocessor_rejects_bad_params():
    with pytest.raises(ValueError):
        VolumePreprocessor(hu_min=10, hu_max=0).fit()


def test_standardized_value_matches_chain():
    v, _ = generate_phantom(random_phantom_spec(3))
    out = standardize(hu_window(v))
    assert standardized_value(v, -30) == pytest.approx(float(out.data.min()), abs=1e-5)


# ------------------------------------------------------------- config

def test_config_file(tmp_path):
    p = tmp_path / "pre.cfg"
    p.write_text("# comment\nthickness = 2.5\nhu-min=-50\nhu_max = 250 # trailing\n")
    cfg = read_config(p)
    assert cfg == PreprocessConfig(2.5, -50.0, 250.0, 256)
    with pytest.raises(ValueError):
        parse_key_values("novalue")
    with pytest.raises(ValueError):
        PreprocessConfig(stage1_size=15)


# ------------------------------------------------------------------ slabs

def _ramp_volume(nz=6):
    data = np.arange(nz, dtype=np.float32)[:, None, None] * np.ones((1, 4, 4), np.float32)
    return Volume(data, (1, 1, 3))


def test_stack_interior():
    x = stack_25d(_ramp_volume(), 3)
    np.testing.assert_array_equal(x[:, 0, 0], [1, 2, 3, 4, 5])


def test_stack_edges_replicate():
    v = _ramp_volume()
    np.testing.assert_array_equal(stack_25d(v, 0)[:, 0, 0], [0, 0, 0, 1, 2])
    np.testing.assert_array_equal(stack_25d(v, 5)[:, 0, 0], [3, 4, 5, 5, 5])
    with pytest.raises(IndexError):
        stack_25d(v, 6)


def test_downsample_constant_and_checkerboard():
    np.testing.assert_allclose(downsample_xy(np.full((2, 8, 8), 3.0), 4), 3.0)
    board = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert downsample_xy(board, 1)[0, 0] == pytest.approx(0.5)


def test_downsample_area_matches_block_mean():
    x = np.random.default_rng(1).standard_normal((3, 12, 12))
    blocks = x.reshape(3, 4, 3, 4, 3).mean(axis=(2, 4))
    np.testing.assert_allclose(downsample_xy(x, 4), blocks, atol=1e-5)


def test_downsample_non_integer_factor_preserves_mean():
    x = np.random.default_rng(2).standard_normal((10, 10))
    assert downsample_xy(x, 4).mean() == pytest.approx(x.mean(), abs=1e-5)


def test_downsample_labels_and_errors():
    lab = np.random.default_rng(3).choice([0, 2], size=(16, 16)).astype(np.uint8)
    out = downsample_xy(lab, 8, labels=True)
    assert set(np.unique(out)) <= {0, 2}
    with pytest.raises(ShapeError):
        downsample_xy(np.zeros((4, 4)), 8)
    up = upsample_labels_xy(out, 16, 16)
    assert up.shape == (16, 16)


def test_classify_group():
    z = np.zeros((4, 4), np.uint8)
    assert classify_group(z) == "B"
    z[1, 1] = 1
    assert classify_group(z) == "K"
    z[2, 2] = 2
    assert classify_group(z) == "KT"
    with pytest.raises(LabelError):
        classify_group(np.full((2, 2), 3))


def test_phantom_slabs_satisfy_group_invariant():
    v, lab = generate_phantom(random_phantom_spec(4))
    pre = VolumePreprocessor()
    img, labels = pre.transform(v), pre.transform_labels(lab)
    for z in range(img.shape[0]):
        s = make_slab(img, labels, z, "p4", size=64)
        assert s.input.shape == (5, 64, 64)
        has2, has1 = np.any(s.target == 2), np.any(s.target == 1)
        assert s.group == ("KT" if has2 else "K" if has1 else "B")
        full = make_slab(img, labels, z, "p4")
        np.testing.assert_array_equal(full.input[2], img.data[z])


# --------------------------------------------------------------- sampling

def _pool(n=(20, 15, 7)):
    pool = {}
    for g, k in zip(("B", "K", "KT"), n):
        pool[g] = [Slab(np.zeros((5, 2, 2)), np.zeros((2, 2)), g, (g, i)) for i in range(k)]
    return pool


def test_stage2_batches_are_half_and_half():
    sampler = BalancedSampler(_pool(), 2, 32, seed=1)
    for _ in range(20):
        counts = Counter(s.group for s in sampler.next_batch())
        assert counts == {"K": 16, "KT": 16}


def test_stage1_rotation_over_three_batches():
    sampler = BalancedSampler(_pool(), 1, 32, seed=2)
    batches = [Counter(s.group for s in sampler.next_batch()) for _ in range(3)]
    for c in batches:
        assert sorted(c.values()) == [10, 11, 11]
    total = sum(batches, Counter())
    assert total == {"B": 32, "K": 32, "KT": 32}
    assert {min(c, key=c.get) for c in batches} == {"B", "K", "KT"}


def test_sampling_without_replacement_within_group_epoch():
    sampler = BalancedSampler(_pool((30, 30, 30)), 1, 30, seed=3)
    seen = [s.provenance for s in sampler.next_batch() + sampler.next_batch() + sampler.next_batch()]
    assert len(seen) == len(set(seen))


def test_sampler_determinism():
    a = [s.provenance for s in sample_batch(_pool(), 1, 32, rng_seed=5, index=4)]
    b = [s.provenance for s in sample_batch(_pool(), 1, 32, rng_seed=5, index=4)]
    c = [s.provenance for s in sample_batch(_pool(), 1, 32, rng_seed=6, index=4)]
    assert a == b and a != c


def test_sampler_empty_group():
    pool = _pool()
    pool["KT"] = []
    with pytest.raises(EmptyGroupError, match="KT"):
        BalancedSampler(pool, 1)
    pool = _pool()
    pool["B"] = []
    BalancedSampler(pool, 2)  # stage 2 does not need B


def test_batch_composition_sums():
    for i in range(6):
        assert sum(batch_composition(1, 32, i).values()) == 32
        assert batch_composition(2, 32, i) == {"K": 16, "KT": 16}


# ----------------------------------------------------------- augmentation

def _kt_slab(seed=0):
    r = np.random.default_rng(seed)
    target = np.zeros((32, 32), np.uint8)
    target[10:22, 8:20] = 1
    target[13:18, 10:15] = 2
    return Slab(r.standard_normal((5, 32, 32)).astype(np.float32), target, "KT", ("v", 0), -1.5)


def test_augment_disabled_is_identity():
    s = _kt_slab()
    out = augment(s, AugmentationPolicy(), 0)
    np.testing.assert_array_equal(out.input, s.input)
    np.testing.assert_array_equal(out.target, s.target)


def test_hflip_twice_is_identity():
    s = _kt_slab()
    pol = AugmentationPolicy(hflip=True, hflip_p=1.0)
    once = augment(s, pol, 1)
    np.testing.assert_array_equal(once.input, s.input[..., ::-1])
    twice = augment(once, pol, 2)
    np.testing.assert_array_equal(twice.input, s.input)
    np.testing.assert_array_equal(twice.target, s.target)


def test_zero_rotation_is_identity():
    s = _kt_slab()
    out = augment(s, AugmentationPolicy(rotation=True), 3, angle=0.0)
    assert np.max(np.abs(out.input - s.input)) < 1e-6
    np.testing.assert_array_equal(out.target, s.target)


def test_rotation_shares_angle_and_fills_background():
    s = _kt_slab()
    s.input[:] = np.ones((32, 32), np.float32) * np.arange(5)[:, None, None]
    out = augment(s, AugmentationPolicy(rotation=True), 4, angle=30.0)
    corner = out.input[:, 0, 0]
    np.testing.assert_allclose(corner, -1.5)  # out of frame after 30 degrees
    inner = out.input[:, 16, 16]
    np.testing.assert_allclose(inner, np.arange(5), atol=1e-5)
    assert set(np.unique(out.target)) <= {0, 1, 2}


def test_crop_zoom_enlarges_structures():
    s = _kt_slab()
    pol = AugmentationPolicy(crop_zoom=True, crop_zoom_p=1.0)
    out = augment(s, pol, 5)
    assert out.input.shape == s.input.shape
    assert (out.target > 0).sum() > (s.target > 0).sum()


def test_augment_leaves_b_and_k_untouched():
    pol = AugmentationPolicy(rotation=True, hflip=True, crop_zoom=True)
    for g in ("B", "K"):
        s = _kt_slab()
        s.group = g
        assert augment(s, pol, 0) is s


def test_augment_reports_vanished_tumor():
    s = _kt_slab()
    s.target[:] = 0
    s.target[0, 0] = 2
    s.target[5, 5] = 1
    assert augment(s, AugmentationPolicy(rotation=True), 6, angle=30.0) is None


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_augment_keeps_shape_and_group(seed):
    pol = AugmentationPolicy(rotation=True, hflip=True, crop_zoom=True)
    out = augment(_kt_slab(seed % 7), pol, seed)
    if out is not None:
        assert out.input.shape == (5, 32, 32)
        assert out.target.shape == (32, 32)
        assert classify_group(out.target) == "KT"
