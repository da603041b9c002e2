import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rehrseg.volume_io import (
    LabelVolume, Volume, VolumeError, load_labels, load_volume, nearest_indices,
    normalize_minmax, resample_axis, resample_isotropic, save_labels, save_volume,
)


def test_roundtrip_preserves_values_and_spacing(tmp_path, rng):
    data = rng.random((5, 7, 9)).astype(np.float32)
    save_volume(Volume(data, (4.0, 1.0, 0.5)), tmp_path / "a.nii.gz")
    back = load_volume(tmp_path / "a.nii.gz", normalize=False)
    assert back.shape == (5, 7, 9)
    assert back.spacing == (4.0, 1.0, 0.5)
    np.testing.assert_array_equal(back.data, data)


def test_load_normalizes_to_unit_range(tmp_path, rng):
    data = (rng.random((4, 6, 6)) * 300 - 50).astype(np.float32)
    save_volume(Volume(data, (1, 1, 1)), tmp_path / "a.nii.gz")
    v = load_volume(tmp_path / "a.nii.gz")
    assert v.data.min() == 0.0 and v.data.max() == pytest.approx(1.0)


def test_constant_volume_normalizes_to_zero():
    assert not normalize_minmax(np.full((2, 2, 2), 7.0)).any()


def test_labels_roundtrip(tmp_path, rng):
    lab = rng.integers(0, 3, (4, 5, 6))
    save_labels(LabelVolume(lab, (2, 1, 1), 3), tmp_path / "l.nii.gz")
    back = load_labels(tmp_path / "l.nii.gz", 3)
    np.testing.assert_array_equal(back.data, lab)
    assert back.num_classes == 3


def test_missing_file_raises(tmp_path):
    with pytest.raises(VolumeError):
        load_volume(tmp_path / "nope.nii.gz")


def test_non_finite_voxel_is_reported(tmp_path):
    data = np.zeros((3, 3, 3), np.float32)
    data[1, 2, 0] = np.nan
    save_volume(Volume(data, (1, 1, 1)), tmp_path / "a.nii.gz")
    with pytest.raises(VolumeError, match=r"\(1, 2, 0\)"):
        load_volume(tmp_path / "a.nii.gz")


def test_non_3d_payload_raises(tmp_path):
    import nibabel as nib
    nib.save(nib.Nifti1Image(np.zeros((3, 3), np.float32), np.eye(4)), str(tmp_path / "a.nii.gz"))
    with pytest.raises(VolumeError):
        load_volume(tmp_path / "a.nii.gz")


def test_label_range_checked():
    with pytest.raises(VolumeError):
        LabelVolume(np.full((2, 2, 2), 2), (1, 1, 1), 2)


def test_resample_isotropic_shape_and_spacing():
    v = Volume(np.zeros((16, 8, 8), np.float32), (4.0, 1.0, 1.0))
    out = resample_isotropic(v)
    assert out.shape == (64, 8, 8)
    assert out.spacing == (1.0, 1.0, 1.0)


def test_isotropic_input_is_identity(rng):
    data = rng.random((6, 6, 6)).astype(np.float32)
    out = resample_isotropic(Volume(data, (1, 1, 1)))
    np.testing.assert_array_equal(out.data, data)


def test_bspline_reproduces_linear_ramp():
    # linear signals are exact under cubic B-spline interpolation with odd extension
    z = np.arange(16, dtype=np.float64)
    data = np.broadcast_to((0.1 + 0.05 * z)[:, None, None], (16, 3, 3)).astype(np.float32)
    out = resample_isotropic(Volume(data, (4.0, 1.0, 1.0)))
    expected = 0.1 + 0.05 * np.arange(64) / 4.0
    np.testing.assert_allclose(out.data[:, 1, 1], expected, atol=1e-5)


def test_bspline_passes_through_samples(rng):
    data = rng.random((10, 4, 4)).astype(np.float32)
    out = resample_isotropic(Volume(data, (4.0, 1.0, 1.0)))
    np.testing.assert_allclose(out.data[::4], data, atol=1e-5)


def test_labels_need_nearest():
    lab = LabelVolume(np.zeros((4, 4, 4), int), (4, 1, 1))
    with pytest.raises(ValueError):
        resample_isotropic(lab, "bspline3")


def test_nearest_labels_keep_class_set(rng):
    lab = LabelVolume(rng.integers(0, 3, (6, 5, 5)), (4, 1, 1), 3)
    out = resample_isotropic(lab, "nearest")
    assert set(np.unique(out.data)) <= {0, 1, 2}
    np.testing.assert_array_equal(out.data[::4], lab.data)


def test_nearest_indices_round_half_up():
    np.testing.assert_array_equal(nearest_indices(4, 16, 4.0), [0, 0, 1, 1, 1, 1, 2, 2, 2, 2, 3, 3, 3, 3, 3, 3])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(4, 20), factor=st.integers(2, 5), seed=st.integers(0, 2**16))
def test_bspline_preserves_constants(n, factor, seed):
    c = np.random.default_rng(seed).random()
    arr = np.full((n, 2, 2), c)
    out = resample_axis(arr, 0, n * factor, float(factor), "bspline3")
    np.testing.assert_allclose(out, c, atol=1e-5)
