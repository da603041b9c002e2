"""Overlap, surface-distance, reconstruction and uncertainty-quality metrics."""
from __future__ import annotations

import numpy as np
from scipy import ndimage


class MetricError(ValueError):
    pass


def _arr(x):
    return np.asarray(getattr(x, "data", x))


def _same_shape(a, b):
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")


def dice(a, b, class_id: int = 1) -> float:
    """2|A and B| / (|A| + |B|) for one class; 1.0 when both masks are empty."""
    a, b = _arr(a) == class_id, _arr(b) == class_id
    _same_shape(a, b)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def surface(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one face-neighbour outside the mask."""
    mask = mask.astype(bool)
    struct = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=struct, border_value=1)


def surface_distances(a: np.ndarray, b: np.ndarray, spacing) -> np.ndarray:
    """Distances (mm) from every surface voxel of ``a`` to the nearest surface voxel of ``b``."""
    sa, sb = surface(a), surface(b)
    dt = ndimage.distance_transform_edt(~sb, sampling=spacing)
    return dt[sa]


def hd95(a, b, spacing=None, class_id: int = 1) -> float:
    """95th percentile of the pooled symmetric surface distances, in mm."""
    spacing = spacing if spacing is not None else getattr(a, "spacing", (1.0, 1.0, 1.0))
    a, b = _arr(a) == class_id, _arr(b) == class_id
    _same_shape(a, b)
    if not a.any() or not b.any():
        raise MetricError("hd95 is undefined for an empty mask")
    dists = np.concatenate([surface_distances(a, b, spacing), surface_distances(b, a, spacing)])
    return float(np.percentile(dists, 95))


def psnr(x, y, data_range: float = 1.0) -> float:
    x, y = _arr(x).astype(np.float64), _arr(y).astype(np.float64)
    _same_shape(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        raise MetricError("PSNR is undefined for identical inputs")
    return 10.0 * np.log10(data_range**2 / mse)


SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5


def _ssim_2d(x, y, data_range):
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2

    def blur(img):
        return ndimage.gaussian_filter(img, SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    mx, my = blur(x), blur(y)
    vx = blur(x * x) - mx * mx
    vy = blur(y * y) - my * my
    cxy = blur(x * y) - mx * my
    smap = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
    pad = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)
    return smap[pad:-pad, pad:-pad].mean()


def ssim(x, y, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM (sigma 1.5) on each axial slice, averaged over slices.

    A border of one window radius is excluded from each slice's mean.
    """
    x, y = _arr(x).astype(np.float64), _arr(y).astype(np.float64)
    _same_shape(x, y)
    return float(np.mean([_ssim_2d(xs, ys, data_range) for xs, ys in zip(x, y)]))


def uncertainty_error_correlation(unc, pred, target) -> float:
    """Pearson correlation between an uncertainty map and the absolute reconstruction error."""
    u = _arr(unc).astype(np.float64).ravel()
    err = np.abs(_arr(pred).astype(np.float64) - _arr(target).astype(np.float64)).ravel()
    if u.shape != err.shape:
        raise MetricError(f"shape mismatch: {u.shape} vs {err.shape}")
    if u.std() == 0 or err.std() == 0:
        raise MetricError("correlation is undefined for a zero-variance input")
    return float(np.corrcoef(u, err)[0, 1])
