"""Phantom generation, preprocessing, augmentation, batching and the USEG1
sample format."""

import numpy as np
import pytest

from uniseg import data as D
from uniseg.data import (
    AugmentConfig,
    Domain,
    PhantomSpec,
    Sample,
    assign_splits,
    augment,
    balanced_batches,
    ct_spec,
    elastic_deform,
    generate_phantom,
    load_dataset,
    mri_spec,
    normalize_slice,
    read_sample,
    resize_bilinear,
    resize_nearest,
    rotate_sample,
    write_dataset,
    write_sample,
)


# phantom generation


def test_generation_is_deterministic():
    spec = mri_spec(64, seed=3)
    a = generate_phantom(spec, Domain.MRI_LIKE, 3)
    b = generate_phantom(spec, Domain.MRI_LIKE, 3)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.mask, y.mask)
        assert x.id == y.id


def test_zero_lesion_spec_gives_empty_masks():
    spec = PhantomSpec(image_size=64, lesion_count=(0, 0), lesion_radius=(4, 8), seed=1)
    for domain in Domain:
        for s in generate_phantom(spec, domain, 5):
            assert s.mask.sum() == 0


def test_sample_invariants():
    for domain, spec in ((Domain.MRI_LIKE, mri_spec(64, 2)), (Domain.CT_LIKE, ct_spec(64, 2))):
        for s in generate_phantom(spec, domain, 5):
            assert s.image.shape == (4, 64, 64)
            assert s.mask.shape == (1, 64, 64)
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert set(np.unique(s.mask)) <= {0, 1}
    ct = generate_phantom(ct_spec(64, 2), Domain.CT_LIKE, 3)
    for s in ct:
        for c in range(1, 4):
            assert np.array_equal(s.image[0], s.image[c])
    mri = generate_phantom(mri_spec(64, 2), Domain.MRI_LIKE, 3)
    for s in mri:
        assert not np.array_equal(s.image[0], s.image[1])  # distinct contrasts


def test_mask_fraction_regimes():
    # distinct imbalance regimes, pinned from a 200-sample measurement
    mri = generate_phantom(mri_spec(128, 0), Domain.MRI_LIKE, 200)
    ct = generate_phantom(ct_spec(128, 0), Domain.CT_LIKE, 200)
    mri_frac = float(np.mean([s.mask.mean() for s in mri]))
    ct_frac = float(np.mean([s.mask.mean() for s in ct]))
    assert 0.02 <= mri_frac <= 0.15
    assert 0.001 <= ct_frac <= 0.02


def test_generation_pure_per_index():
    # sample i depends only on (spec, domain, i), not on how many are drawn
    spec = ct_spec(32, seed=4)
    short = generate_phantom(spec, Domain.CT_LIKE, 2)
    long = generate_phantom(spec, Domain.CT_LIKE, 5)
    for a, b in zip(short, long):
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)


def test_stack_batch_shapes():
    from uniseg.data import stack_batch

    samples = generate_phantom(mri_spec(32, 5), Domain.MRI_LIKE, 3)
    images, masks, domains = stack_batch(samples, dtype=np.float32)
    assert images.data.shape == (3, 4, 32, 32)
    assert images.data.dtype == np.float32
    assert masks.shape == (3, 1, 32, 32)
    assert domains == [Domain.MRI_LIKE] * 3
    assert images.data.min() >= 0.0 and images.data.max() <= 1.0


def test_invalid_spec_ranges():
    with pytest.raises(ValueError):
        PhantomSpec(image_size=64, lesion_radius=(40.0, 50.0)).validate()
    with pytest.raises(ValueError):
        PhantomSpec(lesion_count=(3, 1)).validate()
    with pytest.raises(ValueError):
        generate_phantom(mri_spec(64), Domain.MRI_LIKE, 0)


# normalize / resize


def test_normalize_maps_to_unit_range():
    out = normalize_slice(np.array([[2.0, 4.0]]))
    np.testing.assert_array_equal(out, np.array([[0.0, 1.0]]))
    rng = np.random.default_rng(0)
    arr = rng.standard_normal((3, 8, 8)) * 5 + 2
    out = normalize_slice(arr)
    for c in range(3):
        assert out[c].min() == 0.0 and out[c].max() == 1.0


def test_normalize_constant_and_nonfinite():
    np.testing.assert_array_equal(normalize_slice(np.full((2, 4, 4), 3.0)), np.zeros((2, 4, 4)))
    with pytest.raises(ValueError, match="non-finite"):
        normalize_slice(np.array([[np.inf, 1.0]]))


def test_resize_same_size_is_identity():
    rng = np.random.default_rng(1)
    img = rng.random((3, 8, 8))
    np.testing.assert_array_equal(resize_bilinear(img, 8), img)
    mask = (rng.random((1, 8, 8)) < 0.5).astype(np.uint8)
    np.testing.assert_array_equal(resize_nearest(mask, 8), mask)


def test_resize_ramp_hand_values():
    # corner-aligned 2x2 -> 4x4: sources at 0, 1/3, 2/3, 1
    img = np.array([[[0.0, 3.0], [6.0, 9.0]]])
    out = resize_bilinear(img, 4)
    expect_row0 = [0.0, 1.0, 2.0, 3.0]
    np.testing.assert_allclose(out[0, 0], expect_row0, atol=1e-12)
    np.testing.assert_allclose(out[0, :, 0], [0.0, 2.0, 4.0, 6.0], atol=1e-12)
    assert out[0, 3, 3] == 9.0


def test_resize_constant_image():
    out = resize_bilinear(np.full((2, 5, 5), 0.7), 9)
    np.testing.assert_allclose(out, np.full((2, 9, 9), 0.7), atol=1e-12)


def test_resize_preserves_mask_binarity():
    rng = np.random.default_rng(2)
    mask = (rng.random((1, 16, 16)) < 0.3).astype(np.uint8)
    out = resize_nearest(mask, 11)
    assert set(np.unique(out)) <= {0, 1}


# augmentation


def smooth_centered_sample(size=64):
    """Band-limited content away from the borders, for warp round trips."""
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2
    blob = np.exp(-((yy - c) ** 2 + (xx - c) ** 2) / (2 * (size / 8) ** 2))
    image = np.stack([blob * (0.5 + 0.1 * k) for k in range(4)])
    mask = (blob > 0.5).astype(np.uint8)[None]
    return Sample(image=image, mask=mask, domain=Domain.MRI_LIKE, id="blob")


def test_augment_all_probabilities_zero_is_identity():
    sample = generate_phantom(mri_spec(32, 5), Domain.MRI_LIKE, 1)[0]
    out = augment(sample, np.random.default_rng(0), AugmentConfig.disabled())
    np.testing.assert_array_equal(out.image, sample.image)
    np.testing.assert_array_equal(out.mask, sample.mask)


def test_horizontal_flip_is_involution():
    sample = generate_phantom(mri_spec(32, 6), Domain.MRI_LIKE, 1)[0]
    config = AugmentConfig.disabled()
    config.flip_p = 1.0
    rng = np.random.default_rng(0)
    # flip_p=1 applies horizontal then vertical; applying twice restores
    once = augment(sample, rng, config)
    twice = augment(once, rng, config)
    np.testing.assert_array_equal(twice.image, sample.image)
    np.testing.assert_array_equal(twice.mask, sample.mask)


def test_flip_preserves_mask_pixel_count():
    sample = generate_phantom(ct_spec(64, 7), Domain.CT_LIKE, 1)[0]
    config = AugmentConfig.disabled()
    config.flip_p = 1.0
    out = augment(sample, np.random.default_rng(1), config)
    assert out.mask.sum() == sample.mask.sum()


def test_rotation_round_trip_on_band_limited_image():
    sample = smooth_centered_sample()
    img1, mask1 = rotate_sample(sample.image, sample.mask, 15.0)
    img2, mask2 = rotate_sample(img1, mask1, -15.0)
    err = np.linalg.norm(img2 - sample.image) / np.linalg.norm(sample.image)
    assert err < 0.05
    assert set(np.unique(mask2)) <= {0, 1}


def test_rotation_keeps_mask_binary():
    sample = generate_phantom(mri_spec(64, 8), Domain.MRI_LIKE, 1)[0]
    _, mask = rotate_sample(sample.image, sample.mask, 9.5)
    assert set(np.unique(mask)) <= {0, 1}


def test_elastic_deform_stays_binary_and_bounded():
    sample = generate_phantom(mri_spec(64, 9), Domain.MRI_LIKE, 1)[0]
    img, mask = elastic_deform(sample.image, sample.mask, np.random.default_rng(2))
    assert img.shape == sample.image.shape
    assert img.min() >= 0.0 and img.max() <= 1.0
    assert set(np.unique(mask)) <= {0, 1}


def test_photometric_touches_image_only():
    sample = generate_phantom(mri_spec(32, 10), Domain.MRI_LIKE, 1)[0]
    config = AugmentConfig.disabled()
    config.photometric_p = 1.0
    out = augment(sample, np.random.default_rng(3), config)
    np.testing.assert_array_equal(out.mask, sample.mask)
    assert out.image.min() >= 0.0 and out.image.max() <= 1.0
    assert not np.array_equal(out.image, sample.image)


def test_coarse_dropout_zeroes_image_rectangles_only():
    sample = generate_phantom(mri_spec(64, 11), Domain.MRI_LIKE, 1)[0]
    config = AugmentConfig.disabled()
    config.coarse_dropout_p = 1.0
    out = augment(sample, np.random.default_rng(4), config)
    np.testing.assert_array_equal(out.mask, sample.mask)
    zeroed = (out.image == 0.0) & (sample.image != 0.0)
    assert zeroed.any()


def test_augment_deterministic_per_seed():
    sample = generate_phantom(mri_spec(32, 12), Domain.MRI_LIKE, 1)[0]
    config = AugmentConfig()
    a = augment(sample, np.random.default_rng(5), config)
    b = augment(sample, np.random.default_rng(5), config)
    assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)


# balanced batches


def test_batches_have_exact_composition():
    mri = generate_phantom(mri_spec(32, 13), Domain.MRI_LIKE, 10)
    ct = generate_phantom(ct_spec(32, 13), Domain.CT_LIKE, 10)
    batches = balanced_batches(mri, ct, 4, np.random.default_rng(0))
    assert len(batches) == 5
    for batch in batches:
        assert sum(1 for s in batch if s.domain is Domain.MRI_LIKE) == 2
        assert sum(1 for s in batch if s.domain is Domain.CT_LIKE) == 2


def test_batches_cover_longer_domain():
    mri = generate_phantom(mri_spec(32, 14), Domain.MRI_LIKE, 9)
    ct = generate_phantom(ct_spec(32, 14), Domain.CT_LIKE, 3)
    batches = balanced_batches(mri, ct, 4, np.random.default_rng(1))
    seen = {s.id for b in batches for s in b if s.domain is Domain.MRI_LIKE}
    assert seen == {s.id for s in mri}
    assert len(batches) == 5  # ceil(9/2)


def test_batches_deterministic_per_seed():
    mri = generate_phantom(mri_spec(32, 15), Domain.MRI_LIKE, 6)
    ct = generate_phantom(ct_spec(32, 15), Domain.CT_LIKE, 4)
    a = balanced_batches(mri, ct, 4, np.random.default_rng(7))
    b = balanced_batches(mri, ct, 4, np.random.default_rng(7))
    assert [[s.id for s in batch] for batch in a] == [[s.id for s in batch] for batch in b]


def test_batches_argument_errors():
    mri = generate_phantom(mri_spec(32, 16), Domain.MRI_LIKE, 2)
    with pytest.raises(ValueError, match="even"):
        balanced_batches(mri, mri, 3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="non-empty"):
        balanced_batches(mri, [], 4, np.random.default_rng(0))


# USEG1 format


def test_sample_round_trip(tmp_path):
    sample = generate_phantom(ct_spec(32, 17), Domain.CT_LIKE, 1)[0]
    path = tmp_path / f"{sample.id}.useg"
    write_sample(path, sample)
    back = read_sample(path)
    assert np.array_equal(back.image, sample.image)
    assert np.array_equal(back.mask, sample.mask)
    assert back.domain is sample.domain and back.id == sample.id


def test_sample_file_is_byte_stable(tmp_path):
    sample = generate_phantom(mri_spec(32, 18), Domain.MRI_LIKE, 1)[0]
    p1, p2 = tmp_path / "a.useg", tmp_path / "b.useg"
    write_sample(p1, sample)
    write_sample(p2, read_sample(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_corrupted_magic(tmp_path):
    sample = generate_phantom(mri_spec(32, 19), Domain.MRI_LIKE, 1)[0]
    path = tmp_path / "x.useg"
    write_sample(path, sample)
    blob = bytearray(path.read_bytes())
    blob[0] = ord("X")
    path.write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="offset 0"):
        read_sample(path)


def test_truncated_payload_names_offset(tmp_path):
    sample = generate_phantom(mri_spec(32, 20), Domain.MRI_LIKE, 1)[0]
    path = tmp_path / "y.useg"
    write_sample(path, sample)
    blob = path.read_bytes()
    path.write_bytes(blob[:40])  # header survives, image payload does not
    with pytest.raises(ValueError, match="exceed payload"):
        read_sample(path)


def test_dims_exceeding_payload(tmp_path):
    import struct

    path = tmp_path / "z.useg"
    header = D.USEG_MAGIC + struct.pack("<HBHHH", 1, 0, 4, 64, 64)
    path.write_bytes(header + b"\x00" * 100)  # far fewer than 4*64*64 floats
    with pytest.raises(ValueError, match="exceed payload"):
        read_sample(path)


# dataset directory


def test_split_assignment_counts():
    ids = [f"s{i}" for i in range(20)]
    splits = assign_splits(ids)
    from collections import Counter

    c = Counter(splits.values())
    assert c["train"] == 14 and c["val"] == 3 and c["test"] == 3
    assert assign_splits(ids) == splits  # pure function of ids


def test_dataset_round_trip(tmp_path):
    mri = generate_phantom(mri_spec(32, 21), Domain.MRI_LIKE, 7)
    ct = generate_phantom(ct_spec(32, 21), Domain.CT_LIKE, 7)
    write_dataset(tmp_path, mri + ct)
    ds = load_dataset(tmp_path)
    total = sum(len(v) for v in ds.values())
    assert total == 14
    for split in ("train", "val", "test"):
        domains = {s.domain for s in ds[split]}
        assert domains == {Domain.MRI_LIKE, Domain.CT_LIKE}


def test_load_dataset_requires_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
