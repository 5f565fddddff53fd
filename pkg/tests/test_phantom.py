import filecmp
import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from tomdd.phantom import (HEADER, MAGIC, AugmentConfig, Domain, PhantomSpec, Sample, ShiftParams, SpecError,
                           affine_warp, apply_target_shift, augment, fov_mask, generate_dataset, generate_volume,
                           read_sample, split_volumes)


def _spec(**kw):
    return PhantomSpec(**{"volumes": 3, "slices_per_volume": 4, "seed": 5, **kw})


def test_dataset_counts(tmp_path):
    manifest = generate_dataset(_spec(), "source", tmp_path)
    assert sum(len(v) for v in manifest["volumes"].values()) == 12
    assert len(manifest["volumes"]) == 3
    assert all(len(v) == 4 for v in manifest["volumes"].values())
    assert len(list((tmp_path / "samples").glob("*.bin"))) == 12
    assert (tmp_path / "samples" / "0002_003.bin").exists()
    assert manifest["spec_hash"] == _spec().spec_hash()


def test_dataset_bytes_are_deterministic(tmp_path):
    for name in ("a", "b"):
        generate_dataset(_spec(), "target", tmp_path / name)
    cmp = filecmp.dircmp(tmp_path / "a", tmp_path / "b")
    assert not cmp.diff_files and not cmp.left_only and not cmp.right_only
    for f in (tmp_path / "a" / "samples").iterdir():
        assert f.read_bytes() == (tmp_path / "b" / "samples" / f.name).read_bytes()
    other = tmp_path / "c"
    generate_dataset(_spec(seed=6), "target", other)
    assert (other / "samples" / "0000_000.bin").read_bytes() != (tmp_path / "a" / "samples" / "0000_000.bin").read_bytes()


def test_volume_generation_is_order_independent():
    spec = _spec(volumes=5)
    alone = generate_volume(spec, Domain.TARGET, 3)
    serial = [generate_volume(spec, Domain.TARGET, v) for v in range(5)][3]
    assert all(np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask) for a, b in zip(alone, serial))


def test_sample_file_format(tmp_path):
    generate_dataset(_spec(num_classes=3), "source", tmp_path)
    raw = (tmp_path / "samples" / "0001_002.bin").read_bytes()
    magic, h, w, k = HEADER.unpack_from(raw)
    assert (magic, h, w, k) == (MAGIC, 64, 64, 3)
    assert len(raw) == HEADER.size + 64 * 64 * 5
    image, mask, _ = read_sample(tmp_path / "samples" / "0001_002.bin")
    ref = generate_volume(_spec(num_classes=3), "source", 1)[2]
    assert np.array_equal(image, ref.image) and np.array_equal(mask, ref.mask)
    assert mask.max() < 3
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["spec"]["num_classes"] == 3


def test_identity_shift_target_matches_source_statistics():
    spec = PhantomSpec(volumes=20, slices_per_volume=5, seed=11, shift=ShiftParams.identity(noise_sigma=0.03))
    src = [s.image for v in range(20) for s in generate_volume(spec, "source", v)]
    tgt = [s.image for v in range(20) for s in generate_volume(spec, "target", v)]
    assert len(src) == len(tgt) == 100
    assert abs(np.mean(src) - np.mean(tgt)) < 0.01
    assert abs(np.std(src) - np.std(tgt)) < 0.01


def test_identity_shift_is_noop():
    s = generate_volume(_spec(), "source", 0)[1]
    img, msk = apply_target_shift(s.image, s.mask, ShiftParams.identity(), np.random.default_rng(0))
    assert np.array_equal(img, s.image.astype(np.float64))
    assert np.array_equal(msk, s.mask)


def test_fov_truncation_is_exact():
    n = 64
    image = np.full((n, n), 0.5)
    mask = np.ones((n, n), dtype=np.uint8)
    p = replace(ShiftParams.identity(), fov_radius_fraction=0.5)
    img, msk = apply_target_shift(image, mask, p, np.random.default_rng(0))
    yy, xx = np.mgrid[0:n, 0:n]
    outside = np.hypot(yy - (n - 1) / 2, xx - (n - 1) / 2) > 0.5 * n / 2
    assert np.array_equal(img == 0, outside)
    assert np.array_equal(msk == 0, outside)
    assert np.array_equal(fov_mask(n, 0.5), ~outside)


def _disk_organ(n=64, r=16):
    yy, xx = np.mgrid[0:n, 0:n]
    organ = np.hypot(yy - 31.5, xx - 31.5) <= r
    image = np.where(organ, 0.5, 0.3)
    return image, organ.astype(np.uint8)


@pytest.mark.parametrize("seed", range(5))
def test_vessels_form_separate_bright_components(seed):
    image, mask = _disk_organ()
    p = replace(ShiftParams.identity(), vessel_count=3, vessel_intensity=0.9)
    img, _ = apply_target_shift(image, mask, p, np.random.default_rng(seed))
    interior = ndimage.binary_erosion(mask.astype(bool))
    bright = (img >= 0.8 * img.max()) & interior
    _, n_components = ndimage.label(bright, structure=np.ones((3, 3)))
    assert n_components >= 3


def test_bias_field_monotone_in_amplitude():
    spec = PhantomSpec(volumes=10, slices_per_volume=5, seed=3)
    samples = [s for v in range(10) for s in generate_volume(spec, "source", v)]
    diffs = []
    for amp in (0.05, 0.15, 0.3):
        p = replace(ShiftParams.identity(), bias_field_amplitude=amp)
        d = [np.abs(apply_target_shift(s.image, s.mask, p, np.random.default_rng(i))[0] - s.image).mean()
             for i, s in enumerate(samples)]
        diffs.append(np.mean(d))
    assert len(samples) >= 50
    assert diffs[0] < diffs[1] < diffs[2]


@given(st.integers(0, 2**32 - 1), st.floats(0.3, 1.0), st.floats(0, 0.5), st.integers(0, 5))
@settings(max_examples=15, deadline=None)
def test_shift_output_invariants(seed, fov, bias, vessels):
    s = generate_volume(_spec(), "source", seed % 3)[seed % 4]
    p = ShiftParams(fov_radius_fraction=fov, bias_field_amplitude=bias, vessel_count=vessels)
    img, msk = apply_target_shift(s.image, s.mask, p, np.random.default_rng(seed))
    assert img.shape == msk.shape == s.image.shape
    assert img.min() >= 0 and img.max() <= 1
    # the shift can only remove labels, never add them
    assert np.all((msk == s.mask) | (msk == 0))


def test_spec_validation():
    with pytest.raises(SpecError):
        PhantomSpec(image_size=40).validate()
    with pytest.raises(SpecError):
        PhantomSpec(image_size=8, stages=2).validate()
    with pytest.raises(SpecError):
        PhantomSpec(num_classes=1).validate()
    with pytest.raises(SpecError):
        replace(ShiftParams(), fov_radius_fraction=0.0).validate()
    with pytest.raises(SpecError):
        replace(ShiftParams(), bias_field_amplitude=-1).validate()
    with pytest.raises(SpecError):
        PhantomSpec.from_dict({"volumes": 2, "bogus": 1})


def test_spec_dict_round_trip():
    spec = PhantomSpec(num_classes=3, shift=replace(ShiftParams(), vessel_count=2))
    assert PhantomSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec


def test_multiclass_masks_in_range():
    for s in generate_volume(_spec(num_classes=4), "target", 0):
        assert s.mask.max() < 4
    assert {1, 2, 3} <= set(np.unique(generate_volume(_spec(num_classes=4), "source", 0)[2].mask))


def test_split_is_disjoint_and_complete():
    splits = split_volumes(range(42), seed=3)
    sets = [set(v) for v in splits.values()]
    assert sum(len(s) for s in sets) == 42
    assert set().union(*sets) == set(range(42))
    assert len(splits["test"]) == 14 and len(splits["val"]) == 7 and len(splits["train"]) == 21
    for a in range(3):
        for b in range(a + 1, 3):
            assert not sets[a] & sets[b]


def test_sample_rejects_mismatched_shapes():
    with pytest.raises(ValueError):
        Sample(np.zeros((4, 4)), np.zeros((4, 5), dtype=np.uint8), Domain.SOURCE, 0, 0)


# ---------------------------------------------------------------- augmentation

def _sample(seed=0):
    return generate_volume(_spec(seed=seed), "source", 0)[2]


def test_augment_all_off_is_identity():
    s = _sample()
    out = augment(s, np.random.default_rng(0), AugmentConfig.off())
    assert np.array_equal(out.image, s.image) and np.array_equal(out.mask, s.mask)


def test_flip_is_an_involution():
    s = _sample()
    cfg = AugmentConfig.off(p_flip=1.0)
    twice = augment(augment(s, np.random.default_rng(0), cfg), np.random.default_rng(1), cfg)
    assert np.array_equal(twice.image, s.image) and np.array_equal(twice.mask, s.mask)
    once = augment(s, np.random.default_rng(0), cfg)
    assert not np.array_equal(once.mask, s.mask)


def test_rotation_round_trip_preserves_area():
    rng = np.random.default_rng(0)
    for seed in range(20):
        s = _sample(seed)
        theta = rng.uniform(-30, 30)
        _, m1 = affine_warp(s.image, s.mask, angle_deg=theta)
        _, m2 = affine_warp(s.image, m1, angle_deg=-theta)
        area0, area2 = (s.mask == 1).sum(), (m2 == 1).sum()
        assert abs(area2 - area0) <= 0.05 * area0


def test_geometric_transforms_are_coregistered():
    # piecewise-constant block image == block label map; interior pixels must agree after warping
    n = 64
    yy, xx = np.mgrid[0:n, 0:n]
    labels = ((yy // 8) * 8 + xx // 8) % 251
    image = labels.astype(np.float64)
    for angle, zoom, flip in [(12.0, 1.0, False), (-20.0, 1.1, True), (0.0, 0.9, False)]:
        img, msk = affine_warp(image, labels.astype(np.uint8), angle, zoom, flip)
        interior = np.abs(img - np.round(img)) < 1e-9
        interior &= ndimage.minimum_filter(msk, 3) == ndimage.maximum_filter(msk, 3)
        assert interior.sum() > 1000
        assert np.array_equal(np.round(img[interior]).astype(np.uint8), msk[interior])


@given(st.integers(0, 10_000))
@settings(max_examples=20, deadline=None)
def test_augment_keeps_labels_valid(seed):
    s = generate_volume(_spec(num_classes=3), "source", seed % 3)[seed % 4]
    out = augment(s, np.random.default_rng(seed), AugmentConfig(p_rotate=1, p_zoom=1, p_flip=1, p_contrast=1, p_noise=1))
    assert out.mask.dtype == np.uint8 and set(np.unique(out.mask)) <= set(range(3))
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert out.volume_id == s.volume_id and out.domain == s.domain


def test_intensity_augmentations_leave_mask_alone():
    s = _sample()
    out = augment(s, np.random.default_rng(4), AugmentConfig.off(p_contrast=1.0, p_noise=1.0))
    assert np.array_equal(out.mask, s.mask)
    assert not np.array_equal(out.image, s.image)


def test_dynamic_range_is_affine_towards_soft_tissue():
    image, mask = _disk_organ()
    p = replace(ShiftParams.identity(), dynamic_range=0.5)
    img, msk = apply_target_shift(image, mask, p, np.random.default_rng(0))
    assert np.allclose(img, 0.3 + 0.5 * (image - 0.3))
    assert np.array_equal(msk, mask)


def test_streaks_stay_inside_the_body():
    s = generate_volume(_spec(), "source", 0)[2]
    p = replace(ShiftParams.identity(), streak_count=6, streak_amplitude=0.3)
    img, msk = apply_target_shift(s.image, s.mask, p, np.random.default_rng(1))
    air = s.image <= 0.05
    assert np.array_equal(img[air], s.image[air].astype(np.float64))
    assert np.abs(img - s.image)[~air].max() > 0.1
    assert np.array_equal(msk, s.mask)
