"""Thick-slice acquisition model: Gaussian slice profile, decimation, training pairs."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume_io import LabelVolume, Volume

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


@dataclass(frozen=True)
class SliceProfile:
    r: int
    sigma: float
    kernel: np.ndarray

    @property
    def radius(self) -> int:
        return len(self.kernel) // 2


def make_slice_profile(r: int) -> SliceProfile:
    """Gaussian slice profile whose full width at half maximum equals ``r`` voxels.

    Truncated at +-ceil(3 sigma) taps and renormalized to unit sum.
    """
    if r < 1:
        raise ValueError(f"scale factor must be >= 1, got {r}")
    sigma = r * FWHM_TO_SIGMA
    radius = math.ceil(3.0 * sigma)
    taps = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (taps / sigma) ** 2)
    kernel /= kernel.sum()
    return SliceProfile(int(r), sigma, kernel)


def _check_axis(axis: int, ndim: int = 3) -> int:
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for a {ndim}D volume")
    return axis % ndim


def blur_axis(v: Volume, p: SliceProfile, axis: int) -> Volume:
    """Correlate with the slice profile along ``axis`` (half-sample reflect borders)."""
    axis = _check_axis(axis)
    if v.shape[axis] < len(p.kernel):
        raise ValueError(
            f"extent {v.shape[axis]} along axis {axis} is shorter than the kernel ({len(p.kernel)} taps)"
        )
    out = ndimage.correlate1d(v.data.astype(np.float64), p.kernel, axis=axis, mode="reflect")
    return Volume(out.astype(np.float32), v.spacing)


def downsample_axis(v, r: int, axis: int, offset: int = 0):
    """Keep indices ``offset, offset + r, ...`` along ``axis``; spacing along it grows by ``r``."""
    axis = _check_axis(axis)
    if not 0 <= offset < r:
        raise ValueError(f"offset must lie in [0, {r}), got {offset}")
    if v.shape[axis] < r:
        raise ValueError(f"extent {v.shape[axis]} along axis {axis} is smaller than r={r}")
    index = [slice(None)] * 3
    index[axis] = slice(offset, None, r)
    data = np.ascontiguousarray(v.data[tuple(index)])
    spacing = list(v.spacing)
    spacing[axis] *= r
    if isinstance(v, LabelVolume):
        return LabelVolume(data, tuple(spacing), v.num_classes)
    return Volume(data, tuple(spacing))


def degrade_pair(v: Volume, lab: LabelVolume, r: int, axis: int = 0, offset: int = 0):
    """Blur then decimate the image; decimate the labels without blurring."""
    blurred = blur_axis(v, make_slice_profile(r), axis)
    return downsample_axis(blurred, r, axis, offset), downsample_axis(lab, r, axis, offset)


def interleave(parts, r: int, axis: int = 0) -> np.ndarray:
    """Inverse of taking every offset ``0..r-1``: reassemble by index modulo ``r``."""
    axis = _check_axis(axis)
    arrays = [np.asarray(getattr(p, "data", p)) for p in parts]
    shape = list(arrays[0].shape)
    shape[axis] = sum(a.shape[axis] for a in arrays)
    out = np.empty(shape, dtype=arrays[0].dtype)
    for o, a in enumerate(arrays):
        index = [slice(None)] * 3
        index[axis] = slice(o, None, r)
        out[tuple(index)] = a
    return out


@dataclass
class Pair:
    lr: np.ndarray
    hr: np.ndarray
    lr_labels: np.ndarray
    hr_labels: np.ndarray


@dataclass
class PairSet:
    """Self-SR training pairs, already transposed so the degraded axis is axis 0."""

    pairs: list[Pair]
    degradation_axis: int
    r: int
    num_classes: int = 2
    grid: tuple = field(default=())

    def __len__(self):
        return len(self.pairs)


def _grid_starts(extent: int, size: int, stride: int) -> list[int]:
    if size > extent:
        raise ValueError(f"patch extent {size} exceeds volume extent {extent}")
    return list(range(0, extent - size + 1, stride))


def pair_grid(shape, r: int, patch_size, stride, axis: int = 2) -> tuple[list[int], list[int], list[int]]:
    """Patch start positions along (degraded axis in LR samples, first in-plane, second in-plane)."""
    lr_depth, p_a, p_b = patch_size
    s_depth, s_a, s_b = stride
    others = [a for a in range(3) if a != axis]
    # only LR samples whose full HR neighbourhood exists
    lr_extent = shape[axis] // r
    return (
        _grid_starts(lr_extent, lr_depth, s_depth),
        _grid_starts(shape[others[0]], p_a, s_a),
        _grid_starts(shape[others[1]], p_b, s_b),
    )


def make_selfsr_pairs(v: Volume, lab: LabelVolume, r: int, patch_size=(8, 32, 32), stride=None, axis: int = 2) -> PairSet:
    """Cut LR/HR training pairs by degrading an isotropic volume along an in-plane axis.

    The whole volume is blurred and decimated along ``axis`` once, then aligned
    patches are cut: LR samples ``k0 .. k0 + d`` pair with HR samples
    ``r * k0 .. r * (k0 + d)``. Returned arrays put the degraded axis first, so
    the model always super-resolves its depth axis.
    """
    axis = _check_axis(axis)
    if stride is None:
        stride = (max(patch_size[0] // 2, 1), max(patch_size[1] // 2, 1), max(patch_size[2] // 2, 1))
    if r * patch_size[0] > v.shape[axis]:
        raise ValueError(f"HR patch depth {r * patch_size[0]} exceeds extent {v.shape[axis]} along axis {axis}")
    lr_img, lr_lab = degrade_pair(v, lab, r, axis, 0)
    others = [a for a in range(3) if a != axis]
    order = (axis, *others)
    hr_img = np.transpose(v.data, order)
    hr_lab = np.transpose(lab.data, order)
    lr_img = np.transpose(lr_img.data, order)
    lr_lab = np.transpose(lr_lab.data, order)

    ks, as_, bs = pair_grid(v.shape, r, patch_size, stride, axis)
    d, pa, pb = patch_size
    pairs = []
    for k in ks:
        for a in as_:
            for b in bs:
                lr_sl = (slice(k, k + d), slice(a, a + pa), slice(b, b + pb))
                hr_sl = (slice(r * k, r * (k + d)), slice(a, a + pa), slice(b, b + pb))
                pairs.append(
                    Pair(
                        lr_img[lr_sl].copy(),
                        hr_img[hr_sl].astype(np.float32),
                        lr_lab[lr_sl].copy(),
                        hr_lab[hr_sl].copy(),
                    )
                )
    return PairSet(pairs, axis, r, lab.num_classes, (len(ks), len(as_), len(bs)))


def generate_pseudo_lr_set(hr_img: Volume, hr_labels: LabelVolume, r: int, axis: int = 0):
    """One degraded copy per decimation offset ``0..r-1`` along the through-plane axis."""
    return [degrade_pair(hr_img, hr_labels, r, axis, o) for o in range(r)]
