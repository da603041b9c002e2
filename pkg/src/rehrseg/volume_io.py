"""NIfTI-1 I/O and isotropic resampling for annotated volumes.

Arrays are indexed ``(z, y, x)`` with ``z`` the through-plane (slice-stacking)
axis. Orientation matrices are ignored; spacing comes from the header pixdim.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import nibabel as nib
import numpy as np
from scipy import ndimage

Spacing = tuple[float, float, float]


class VolumeError(ValueError):
    """Raised for malformed volumes or unreadable volume files."""


@dataclass(frozen=True)
class Volume:
    data: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"expected a 3D array, got shape {self.data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.data.shape


@dataclass(frozen=True)
class LabelVolume:
    data: np.ndarray
    spacing: Spacing
    num_classes: int = 2

    def __post_init__(self):
        if self.data.ndim != 3:
            raise VolumeError(f"expected a 3D array, got shape {self.data.shape}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise VolumeError(f"spacing must be three positive values, got {self.spacing}")
        if self.num_classes < 1:
            raise VolumeError("num_classes must be positive")
        if self.data.size and (self.data.min() < 0 or self.data.max() >= self.num_classes):
            raise VolumeError(
                f"label values must lie in [0, {self.num_classes}), "
                f"got range [{self.data.min()}, {self.data.max()}]"
            )
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self):
        return self.data.shape


def _to_nifti_order(arr: np.ndarray) -> np.ndarray:
    # nibabel stores (i, j, k) = (x, y, z); we keep (z, y, x) in memory.
    return np.ascontiguousarray(np.transpose(arr, (2, 1, 0)))


def _read(path) -> tuple[np.ndarray, Spacing]:
    path = Path(path)
    if not path.exists():
        raise VolumeError(f"no such volume file: {path}")
    img = nib.load(str(path))
    if len(img.shape) != 3:
        raise VolumeError(f"{path}: expected a 3D payload, got shape {img.shape}")
    arr = np.asarray(img.dataobj)
    zooms = img.header.get_zooms()[:3]
    spacing = (float(zooms[2]), float(zooms[1]), float(zooms[0]))
    return _to_nifti_order(arr), spacing


def normalize_minmax(arr: np.ndarray) -> np.ndarray:
    """Map to [0, 1]; a constant array maps to zeros."""
    arr = arr.astype(np.float32)
    lo, hi = float(arr.min()), float(arr.max())
    if hi == lo:
        return np.zeros_like(arr)
    return ((arr - lo) / (hi - lo)).astype(np.float32)


def load_volume(path, normalize: bool = True) -> Volume:
    """Load a 3D NIfTI image, min-max normalized to [0, 1] by default.

    ``normalize=False`` returns the stored intensities (used by evaluation to
    put predictions and hidden ground truth in a common intensity frame).
    """
    arr, spacing = _read(path)
    finite = np.isfinite(arr)
    if not finite.all():
        bad = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise VolumeError(f"{path}: non-finite voxel at index {bad}")
    data = normalize_minmax(arr) if normalize else arr.astype(np.float32)
    return Volume(data, spacing)


def load_labels(path, num_classes: int | None = None) -> LabelVolume:
    arr, spacing = _read(path)
    if not np.isfinite(arr).all():
        bad = tuple(int(i) for i in np.argwhere(~np.isfinite(arr))[0])
        raise VolumeError(f"{path}: non-finite voxel at index {bad}")
    labels = np.rint(arr).astype(np.int64)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1, 2)
    return LabelVolume(labels, spacing, num_classes)


def _write(arr: np.ndarray, spacing: Spacing, path, dtype) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise VolumeError(f"parent directory does not exist: {path.parent}")
    img = nib.Nifti1Image(_to_nifti_order(arr.astype(dtype)), np.diag([spacing[2], spacing[1], spacing[0], 1.0]))
    img.header.set_zooms((spacing[2], spacing[1], spacing[0]))
    img.header.set_data_dtype(dtype)
    try:
        nib.save(img, str(path))
    except OSError as exc:
        raise VolumeError(f"cannot write {path}: {exc}") from exc


def save_volume(v: Volume, path) -> None:
    _write(v.data, v.spacing, path, np.float32)


def save_labels(lab: LabelVolume, path) -> None:
    dtype = np.uint8 if lab.num_classes <= 255 else np.int16
    _write(lab.data, lab.spacing, path, dtype)


@lru_cache(maxsize=64)
def _bspline_matrix(n: int, m: int, factor: float) -> np.ndarray:
    # Column j holds the cubic B-spline interpolant of a unit impulse at j.
    # Odd (point) reflection extends linear signals exactly past the ends.
    pad = min(max(n - 1, 1), 24)
    padded = np.pad(np.eye(n), ((pad, pad), (0, 0)), mode="reflect", reflect_type="odd")
    coords = np.arange(m, dtype=np.float64) / factor + pad
    mat = np.empty((m, n))
    for j in range(n):
        mat[:, j] = ndimage.map_coordinates(padded[:, j], coords[None], order=3, mode="mirror")
    mat.setflags(write=False)
    return mat


def nearest_indices(n: int, m: int, factor: float) -> np.ndarray:
    """Source index of each of ``m`` target samples (round half up, clamped)."""
    return np.clip(np.floor(np.arange(m) / factor + 0.5).astype(np.int64), 0, n - 1)


def resample_axis(arr: np.ndarray, axis: int, m: int, factor: float, method: str) -> np.ndarray:
    """Resample one axis to ``m`` samples; target sample i sits at source coordinate i / factor.

    This alignment puts source sample k on target sample ``factor * k``, which
    is where offset-0 decimation takes it from.
    """
    n = arr.shape[axis]
    if m == n and factor == 1.0:
        return arr.copy()
    if method == "nearest":
        return np.take(arr, nearest_indices(n, m, factor), axis=axis)
    if method != "bspline3":
        raise ValueError(f"unknown interpolation method {method!r}")
    mat = _bspline_matrix(n, m, float(factor))
    out = np.tensordot(mat, np.moveaxis(arr.astype(np.float64), axis, 0), axes=(1, 0))
    return np.moveaxis(out, 0, axis).astype(np.float32)


def resample_isotropic(v, method: str = "bspline3"):
    """Resample to isotropic spacing equal to the finest spacing component.

    ``method`` must be ``"nearest"`` for :class:`LabelVolume` inputs.
    """
    is_labels = isinstance(v, LabelVolume)
    if is_labels and method != "nearest":
        raise ValueError("label volumes must be resampled with method='nearest'")
    target = min(v.spacing)
    data = v.data
    for axis, s in enumerate(v.spacing):
        factor = s / target
        if factor == 1.0:
            continue
        m = int(round(data.shape[axis] * factor))
        data = resample_axis(data, axis, m, factor, method)
    spacing = (target, target, target)
    if is_labels:
        return LabelVolume(data, spacing, v.num_classes)
    return Volume(data, spacing)
