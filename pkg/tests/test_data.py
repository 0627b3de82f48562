import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nexusseg.data import (
    PatchSource,
    SamplerSpec,
    TumorSpec,
    VolumeSet,
    cut_batch,
    extract_patch_pair,
    generate_phantom,
    normalize_slice,
    preprocess_volume,
    read_volume,
    sample_centers,
    sample_patches,
    standardize_planes,
    write_label_map,
    write_volume,
)
from nexusseg.errors import BoundsError, ParameterError, ShapeError, VersionError
from nexusseg.tensor import new_rng


def percentile_by_sorting(v, q):
    s = np.sort(v)
    pos = (len(s) - 1) * q / 100
    lo = int(np.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def test_normalize_constant_slice():
    assert not normalize_slice(np.full((8, 8), 7.0)).any()


def test_normalize_mean_std():
    x = np.zeros((10, 10))
    x[2:8, 2:8] = 8.0
    x[2:8, 2:5] = 12.0
    out = normalize_slice(x)
    brain = out[x != 0]
    assert abs(brain.mean()) < 1e-9 and abs(brain.std() - 1) < 1e-9
    assert not out[x == 0].any()


def test_normalize_clips_outlier():
    rng = new_rng(0)
    x = 1.0 + 0.01 * rng.random((20, 20))
    x[3, 4] = 1e6
    vals = x.ravel()
    lo, hi = percentile_by_sorting(vals, 1), percentile_by_sorting(vals, 99)
    clipped = np.clip(vals, lo, hi)
    ref = ((clipped - clipped.mean()) / clipped.std()).reshape(x.shape)
    np.testing.assert_allclose(normalize_slice(x), ref, atol=1e-9)
    assert normalize_slice(x)[3, 4] < 3


def test_preprocess_per_slice_and_volume():
    vol = generate_phantom(1, (4, 40, 40))
    out = preprocess_volume(vol)
    brain = vol.brain()
    for m in range(4):
        for z in range(4):
            v = out.modalities[m, z][brain[z]]
            assert abs(v.mean()) < 1e-9 and abs(v.std() - 1) < 1e-9
    assert not out.modalities[:, ~brain].any()
    pv = preprocess_volume(vol, per_volume=True)
    assert abs(pv.modalities[0][brain].mean()) < 1e-9


def test_patch_middle_corner_and_cocentric():
    vol = generate_phantom(2, (3, 70, 70))
    pair = extract_patch_pair(vol, (1, 35, 35), standardize=False)
    big = vol.modalities[:, 1, 35 - 16 : 35 + 17, 35 - 16 : 35 + 17]
    assert np.array_equal(pair.big, big) and pair.big.shape == (4, 33, 33)
    assert np.array_equal(pair.small, pair.big[:, 9:24, 9:24])
    assert pair.label == vol.labels[1, 35, 35]
    corner = extract_patch_pair(vol, (0, 0, 0), standardize=False)
    assert not corner.big[:, :16, :16].any()
    assert np.array_equal(corner.small, corner.big[:, 9:24, 9:24])


def test_patch_bounds():
    vol = generate_phantom(2, (2, 20, 20))
    for c in [(2, 0, 0), (0, -1, 3), (0, 5, 20)]:
        with pytest.raises(BoundsError):
            extract_patch_pair(vol, c)


@given(st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_patch_standardization(seed):
    rng = new_rng(seed)
    x = rng.normal(rng.uniform(-5, 5), rng.uniform(0.1, 9), size=(4, 33, 33))
    x[2] = 3.0
    s = standardize_planes(x)
    for m in (0, 1, 3):
        assert abs(s[m].mean()) < 1e-6 and abs(s[m].var() - 1) < 1e-6
    assert not s[2].any()


def _ninety_eight_percent_healthy():
    labels = np.zeros((1, 50, 50), np.uint8)
    labels[0, :5, :10] = 2
    return VolumeSet(np.ones((4, 1, 50, 50), np.float32), labels)


def test_samplers():
    vols = [generate_phantom(s, (16, 48, 48)) for s in (0, 1)]
    s = sample_centers(vols, SamplerSpec("balanced", 50, 3))
    assert np.bincount(s.labels, minlength=5).tolist() == [10] * 5
    s2 = sample_centers(vols, SamplerSpec("balanced", 53, 3))
    counts = np.bincount(s2.labels, minlength=5)
    assert counts.max() - counts.min() <= 1 and counts.sum() == 53
    for (v, z, y, x), lab in zip(s2.index, s2.labels):
        assert vols[v].labels[z, y, x] == lab
    again = sample_centers(vols, SamplerSpec("balanced", 53, 3))
    assert np.array_equal(again.index, s2.index)
    t = sample_centers([_ninety_eight_percent_healthy()], SamplerSpec("true", 10**4, 5))
    assert abs((t.labels == 0).mean() - 0.98) <= 0.01


def test_balanced_sampler_redistributes_absent_classes():
    s = sample_centers([_ninety_eight_percent_healthy()], SamplerSpec("balanced", 11, 0))
    assert s.absent == [1, 3, 4]
    assert sorted(np.bincount(s.labels, minlength=5).tolist()) == [0, 0, 0, 5, 6]
    with pytest.raises(ParameterError):
        SamplerSpec("weird", 3)


def test_sample_patches_and_cut_batch_agree():
    vols = [generate_phantom(s, (6, 40, 40)) for s in (3, 4)]
    spec = SamplerSpec("balanced", 12, 9)
    pairs = sample_patches(vols, spec)
    s = sample_centers(vols, spec)
    p33, p15 = cut_batch([PatchSource(v) for v in vols], s.index)
    for i, pair in enumerate(pairs):
        assert np.array_equal(pair.big, p33[i]) and np.array_equal(pair.small, p15[i])
        assert pair.label == s.labels[i]


def test_phantom_variants():
    free = generate_phantom(0, (8, 32, 32), TumorSpec(radius=(0, 0, 0)))
    assert not free.labels.any()
    full = generate_phantom(0)
    assert full.shape == (64, 64, 64)
    assert (np.bincount(full.labels.ravel(), minlength=5) > 0).all()
    clean = generate_phantom(5, (12, 40, 40), noise_std=0)
    for lab in range(1, 5):
        sel = clean.labels == lab
        if sel.any():
            for m in range(4):
                assert np.unique(clean.modalities[m][sel]).size == 1
    assert np.array_equal(generate_phantom(5, (4, 20, 20)).modalities, generate_phantom(5, (4, 20, 20)).modalities)


def test_volume_round_trip(tmp_path):
    vol = generate_phantom(6, (5, 24, 30))
    write_volume(tmp_path / "v.nxv", vol)
    back = read_volume(tmp_path / "v.nxv")
    assert np.array_equal(back.modalities, vol.modalities) and np.array_equal(back.labels, vol.labels)
    assert back.modalities.dtype == np.float32
    write_label_map(tmp_path / "l.nxv", vol.labels)
    lab = read_volume(tmp_path / "l.nxv")
    assert lab.modalities is None and np.array_equal(lab.labels, vol.labels)
    blob = (tmp_path / "v.nxv").read_bytes()
    assert blob[:4] == b"NXV1" and blob[20] == 4 and blob[21] == 1
    (tmp_path / "t.nxv").write_bytes(blob[:-10])
    with pytest.raises(VersionError):
        read_volume(tmp_path / "t.nxv")


def test_volume_validation():
    with pytest.raises(ShapeError):
        VolumeSet(None, None)
    with pytest.raises(ShapeError):
        VolumeSet(np.zeros((4, 2, 3, 3)), np.zeros((2, 3, 4), np.uint8))
    with pytest.raises(ParameterError):
        VolumeSet(np.zeros((4, 1, 2, 2)), np.full((1, 2, 2), 5))
