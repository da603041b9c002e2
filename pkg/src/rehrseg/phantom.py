"""Synthetic annotated volumes with hidden isotropic ground truth."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .degrade import degrade_pair
from .volume_io import LabelVolume, Volume, save_labels, save_volume


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 64
    n_blobs: int = 2
    intensity_texture: float = 0.15
    seed: int = 0
    radius_range: tuple = (5.0, 12.0)
    contrast_range: tuple = (0.3, 0.5)
    fg_fraction: tuple = (0.01, 0.15)
    feather: float = 1.0
    max_tries: int = 50

    def validate(self):
        lo, hi = self.radius_range
        if self.size < 16 or self.n_blobs < 1:
            raise ValueError("phantom needs size >= 16 and at least one blob")
        if not 0 < lo <= hi or 2 * (hi + 2) >= self.size:
            raise ValueError(f"radius range {self.radius_range} does not fit a {self.size}^3 grid")
        if not 0 <= self.fg_fraction[0] < self.fg_fraction[1] <= 1:
            raise ValueError(f"invalid foreground fraction bounds {self.fg_fraction}")
        if self.intensity_texture < 0:
            raise ValueError("texture amplitude must be non-negative")


def _smooth_field(rng, size, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal((size, size, size)), sigma, mode="wrap")
    field -= field.mean()
    return field / (np.abs(field).max() + 1e-12)


def _ellipsoid(rng, spec: PhantomSpec, grid):
    radii = rng.uniform(*spec.radius_range, size=3)
    rot = Rotation.random(random_state=int(rng.integers(2**31))).as_matrix()
    # a rotated ellipsoid stays inside its bounding sphere of radius max(radii)
    margin = radii.max() + 2
    center = rng.uniform(margin, spec.size - 1 - margin, size=3)
    rel = np.stack([g - c for g, c in zip(grid, center)], axis=-1) @ rot
    return ((rel / radii) ** 2).sum(-1) <= 1.0


def generate_phantom(spec: PhantomSpec):
    """Textured background with feathered ellipsoids; labels are the crisp ellipsoids.

    Returns ``(Volume, LabelVolume)`` on an isotropic 1 mm grid, deterministic in ``spec.seed``.
    """
    spec.validate()
    grid = np.meshgrid(*(np.arange(spec.size, dtype=np.float64),) * 3, indexing="ij")
    for attempt in range(spec.max_tries):
        rng = np.random.default_rng([spec.seed, attempt])
        labels = np.zeros((spec.size,) * 3, dtype=bool)
        image = 0.35 + spec.intensity_texture * _smooth_field(rng, spec.size, spec.size / 8)
        for _ in range(spec.n_blobs):
            blob = _ellipsoid(rng, spec, grid)
            soft = ndimage.gaussian_filter(blob.astype(np.float64), spec.feather)
            level = image + rng.uniform(*spec.contrast_range)
            image = image * (1.0 - soft) + level * soft
            labels |= blob
        frac = labels.mean()
        if spec.fg_fraction[0] <= frac <= spec.fg_fraction[1]:
            break
    else:
        raise ValueError(f"could not place blobs within foreground bounds {spec.fg_fraction}")
    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    spacing = (1.0, 1.0, 1.0)
    return Volume(image, spacing), LabelVolume(labels.astype(np.int64), spacing, 2)


def make_benchmark(n: int, r: int, seed: int, out_dir, n_val: int | None = None, **spec_kwargs) -> dict:
    """Write hidden HR ground truth under ``gt/`` and degraded LR cases under ``train/``.

    Returns the manifest (also written to ``out_dir/manifest.json``). Paths in
    it are relative to ``out_dir``.
    """
    if n < 2:
        raise ValueError("a benchmark needs at least two cases")
    n_val = max(1, n // 6) if n_val is None else n_val
    if not 0 < n_val < n:
        raise ValueError(f"n_val must lie in (0, {n})")
    out_dir = Path(out_dir)
    (out_dir / "gt").mkdir(parents=True, exist_ok=True)
    (out_dir / "train").mkdir(parents=True, exist_ok=True)
    val_ids = set(np.random.default_rng(seed).permutation(n)[:n_val].tolist())
    cases = []
    for i in range(n):
        cid = f"case_{i:03d}"
        spec = PhantomSpec(seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]), **spec_kwargs)
        hr_img, hr_lab = generate_phantom(spec)
        lr_img, lr_lab = degrade_pair(hr_img, hr_lab, r, axis=0, offset=0)
        entry = {
            "id": cid,
            "split": "val" if i in val_ids else "train",
            "lr_image": f"train/{cid}_img.nii.gz",
            "lr_labels": f"train/{cid}_lab.nii.gz",
            "hr_image": f"gt/{cid}_img.nii.gz",
            "hr_labels": f"gt/{cid}_lab.nii.gz",
            "phantom_seed": spec.seed,
        }
        save_volume(hr_img, out_dir / entry["hr_image"])
        save_labels(hr_lab, out_dir / entry["hr_labels"])
        save_volume(lr_img, out_dir / entry["lr_image"])
        save_labels(lr_lab, out_dir / entry["lr_labels"])
        cases.append(entry)
    spec_fields = asdict(PhantomSpec(**spec_kwargs))
    spec_fields.pop("seed")
    manifest = {"r": r, "seed": seed, "n": n, "phantom": spec_fields, "cases": cases}
    text = json.dumps(manifest, indent=2, sort_keys=True)
    (out_dir / "manifest.json").write_text(text)
    return json.loads(text)
