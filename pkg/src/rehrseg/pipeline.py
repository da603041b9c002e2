"""Pipeline stages over an experiment workdir.

Layout under ``cfg.workdir``::

    data/      benchmark (gt/ hidden HR, train/ visible LR, manifest.json)
    selfsr/    self-SR checkpoint
    pseudo/    pseudo-HR bundles, pseudo-LR set, manifest.json
    seg/<run>/ segmenter checkpoints
    infer/<run>/ predicted masks
    eval/      metric tables and summaries
"""
from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path

import numpy as np

from . import metrics
from .config import ExperimentConfig
from .degrade import PairSet, generate_pseudo_lr_set, make_selfsr_pairs
from .phantom import make_benchmark
from .segmenter.training import SegCheckpoint, SegConfig, build_seg_dataset, infer_segmenter, train_segmenter
from .selfsr.training import PseudoHRBundle, SelfSRCheckpoint, infer_selfsr, train_selfsr
from .volume_io import (
    LabelVolume,
    Volume,
    load_labels,
    load_volume,
    nearest_indices,
    resample_isotropic,
    save_labels,
    save_volume,
)

log = logging.getLogger(__name__)


class CaseNotFound(KeyError):
    pass


# -- benchmark -------------------------------------------------------------

def data_dir(cfg: ExperimentConfig) -> Path:
    return cfg.root / "data"


def load_manifest(cfg: ExperimentConfig) -> dict:
    path = data_dir(cfg) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no benchmark manifest at {path}; run the phantom stage first")
    return json.loads(path.read_text())


def find_case(manifest: dict, case_id: str) -> dict:
    for entry in manifest["cases"]:
        if entry["id"] == case_id:
            return entry
    raise CaseNotFound(f"unknown case id {case_id!r}")


def load_lr_case(cfg: ExperimentConfig, entry: dict) -> tuple[Volume, LabelVolume]:
    root = data_dir(cfg)
    return load_volume(root / entry["lr_image"]), load_labels(root / entry["lr_labels"], cfg.num_classes)


def run_phantom(cfg: ExperimentConfig) -> dict:
    p = cfg.phantom
    return make_benchmark(p.n, cfg.r, cfg.seed, data_dir(cfg), n_val=p.n_val, size=p.size,
                          n_blobs=p.n_blobs, intensity_texture=p.intensity_texture)


# -- self-SR ---------------------------------------------------------------

def build_selfsr_pairs(volumes, scfg) -> PairSet:
    """Training pairs from LR cases: isotropic resampling, then in-plane degradation."""
    pairs = []
    axes = (2, 1) if scfg.pairs_along_y else (2,)
    for img, lab in volumes:
        iso_img = resample_isotropic(img, "bspline3")
        iso_lab = resample_isotropic(lab, "nearest")
        for axis in axes:
            pairs.extend(make_selfsr_pairs(iso_img, iso_lab, scfg.r, scfg.patch_size, scfg.stride, axis).pairs)
    return PairSet(pairs, 2, scfg.r, scfg.num_classes)


def selfsr_dir(cfg: ExperimentConfig) -> Path:
    return cfg.root / "selfsr"


def run_train_sr(cfg: ExperimentConfig, log_every: int = 100) -> SelfSRCheckpoint:
    manifest = load_manifest(cfg)
    scfg = cfg.selfsr_config()
    # self-supervised: every visible LR case may be used, HR stays hidden
    volumes = [load_lr_case(cfg, e) for e in manifest["cases"]]
    pairs = build_selfsr_pairs(volumes, scfg)
    resume = None
    if cfg.selfsr.resume and (selfsr_dir(cfg) / "manifest.json").exists():
        resume = SelfSRCheckpoint.load(selfsr_dir(cfg))
        log.info("resuming self-SR from iteration %d", resume.iteration)
    log.info("self-SR: %d training pairs", len(pairs))
    ckpt = train_selfsr(pairs, scfg, resume=resume, log_every=log_every)
    ckpt.save(selfsr_dir(cfg))
    return ckpt


def pseudo_dir(cfg: ExperimentConfig) -> Path:
    return cfg.root / "pseudo"


def run_superres(cfg: ExperimentConfig) -> dict:
    ckpt = SelfSRCheckpoint.load(selfsr_dir(cfg))
    if ckpt.config.r != cfg.r:
        raise ValueError(f"self-SR checkpoint has r={ckpt.config.r}, config has r={cfg.r}")
    manifest = load_manifest(cfg)
    out = pseudo_dir(cfg)
    (out / "lr").mkdir(parents=True, exist_ok=True)
    model = ckpt.model()
    entries = []
    for case in manifest["cases"]:
        cid = case["id"]
        lr, lr_lab = load_lr_case(cfg, case)
        bundle = infer_selfsr(lr, lr_lab, ckpt, r=cfg.r, model=model)
        if bundle.image.shape[0] != cfg.r * lr.shape[0]:
            raise ValueError(f"{cid}: bundle depth {bundle.image.shape[0]} != r x LR depth")
        entry = {"id": cid, "split": case["split"], "image": f"{cid}_img.nii.gz",
                 "labels": f"{cid}_lab.nii.gz", "uncertainty": f"{cid}_unc.nii.gz",
                 "features": f"{cid}_feat.npy", "pseudo_lr": []}
        save_volume(bundle.image, out / entry["image"])
        save_labels(bundle.labels, out / entry["labels"])
        save_volume(Volume(bundle.uncertainty, bundle.image.spacing), out / entry["uncertainty"])
        np.save(out / entry["features"], bundle.features.astype(np.float32))
        for o, (img, lab) in enumerate(generate_pseudo_lr_set(bundle.image, bundle.labels, cfg.r)):
            item = {"offset": o, "image": f"lr/{cid}_o{o}_img.nii.gz", "labels": f"lr/{cid}_o{o}_lab.nii.gz"}
            save_volume(img, out / item["image"])
            save_labels(lab, out / item["labels"])
            entry["pseudo_lr"].append(item)
        entries.append(entry)
    pm = {"r": cfg.r, "seed": cfg.seed, "cases": entries,
          "n_pseudo_lr": sum(len(e["pseudo_lr"]) for e in entries)}
    (out / "manifest.json").write_text(json.dumps(pm, indent=2, sort_keys=True))
    return pm


def load_bundle(cfg: ExperimentConfig, entry: dict) -> PseudoHRBundle:
    root = pseudo_dir(cfg)
    return PseudoHRBundle(
        load_volume(root / entry["image"], normalize=False),
        load_labels(root / entry["labels"], cfg.num_classes),
        load_volume(root / entry["uncertainty"], normalize=False).data,
        np.load(root / entry["features"]),
    )


def load_pseudo_manifest(cfg: ExperimentConfig) -> dict:
    path = pseudo_dir(cfg) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no pseudo-HR data at {path}; run the superres stage first")
    return json.loads(path.read_text())


# -- segmentation ----------------------------------------------------------

def auto_run_name(scfg: SegConfig) -> str:
    flags = (scfg.pseudo_data_on, scfg.hr_head_on, scfg.uncertainty_on, scfg.distill_on)
    if not any(flags):
        return "baseline"
    tags = [t for t, on in zip(("pseudo", "hr", "unc", "kd"), flags) if on]
    name = "+".join(tags)
    if scfg.distill_on:
        name += f"_lam{scfg.lam:g}"
    return name


def needs_selfsr(scfg: SegConfig) -> bool:
    return scfg.pseudo_data_on or scfg.hr_head_on or scfg.uncertainty_on or scfg.distill_on


def seg_dataset(cfg: ExperimentConfig, scfg: SegConfig, split: str = "train"):
    manifest = load_manifest(cfg)
    cases = [e for e in manifest["cases"] if e["split"] == split]
    if not needs_selfsr(scfg):
        return [s for e in cases for s in build_seg_dataset(e["id"], *load_lr_case(cfg, e), None, cfg.r)]
    pm = {e["id"]: e for e in load_pseudo_manifest(cfg)["cases"]}
    selfsr = SelfSRCheckpoint.load(selfsr_dir(cfg)) if (scfg.pseudo_data_on and scfg.distill_on) else None
    samples = []
    for e in cases:
        lr, lr_lab = load_lr_case(cfg, e)
        bundle = load_bundle(cfg, pm[e["id"]])
        samples += build_seg_dataset(e["id"], lr, lr_lab, bundle, cfg.r, selfsr, pseudo=scfg.pseudo_data_on)
    return samples


def seg_root(cfg: ExperimentConfig) -> Path:
    return cfg.root / "seg"


def run_names(cfg: ExperimentConfig) -> list[str]:
    if cfg.seg.lambda_sweep:
        return [auto_run_name(cfg.seg_config(lam)) for lam in cfg.seg.lambda_sweep]
    return [cfg.seg.run_name or auto_run_name(cfg.seg_config())]


def run_train_seg(cfg: ExperimentConfig, log_every: int = 10) -> list[Path]:
    lams = cfg.seg.lambda_sweep or [cfg.seg.lam]
    samples = None
    out = []
    for lam, name in zip(lams, run_names(cfg)):
        scfg = cfg.seg_config(lam)
        if samples is None:
            samples = seg_dataset(cfg, scfg)
        ckpt = train_segmenter(samples, scfg, log_every=log_every)
        out.append(ckpt.save(seg_root(cfg) / name))
    return out


def run_infer(cfg: ExperimentConfig, case_id: str, run: str | None = None) -> dict:
    manifest = load_manifest(cfg)
    entry = find_case(manifest, case_id)
    run = run or run_names(cfg)[0]
    ckpt = SegCheckpoint.load(seg_root(cfg) / run)
    lr, _ = load_lr_case(cfg, entry)
    lr_mask, hr_mask = infer_segmenter(lr, ckpt)
    out = cfg.root / "infer" / run
    out.mkdir(parents=True, exist_ok=True)
    paths = {"lr": out / f"{case_id}_lr_seg.nii.gz"}
    save_labels(lr_mask, paths["lr"])
    if hr_mask is not None:
        paths["hr"] = out / f"{case_id}_hr_seg.nii.gz"
        save_labels(hr_mask, paths["hr"])
    return paths


# -- evaluation ------------------------------------------------------------

def nn_upsample_labels(lab: LabelVolume, r: int) -> LabelVolume:
    idx = nearest_indices(lab.shape[0], r * lab.shape[0], float(r))
    spacing = (lab.spacing[0] / r, lab.spacing[1], lab.spacing[2])
    return LabelVolume(lab.data[idx], spacing, lab.num_classes)


def bspline_upsample(img: Volume, r: int) -> np.ndarray:
    return np.clip(resample_isotropic(img, "bspline3").data, 0.0, 1.0)


def safe_hd95(a, b, spacing):
    try:
        return metrics.hd95(a, b, spacing)
    except metrics.MetricError:
        return None


def mask_metrics(pred: np.ndarray, ref: np.ndarray, spacing) -> dict:
    return {"dsc": metrics.dice(pred, ref), "hd95": safe_hd95(pred, ref, spacing)}


def sr_case_metrics(cfg: ExperimentConfig, entry: dict, bundle: PseudoHRBundle) -> dict:
    """Self-SR vs interpolation against the hidden HR ground truth.

    Ground truth is mapped into the LR volume's normalised intensity frame so
    that both reconstructions are compared on the scale they were produced in.
    """
    root = data_dir(cfg)
    lr = load_volume(root / entry["lr_image"])
    lr_raw = load_volume(root / entry["lr_image"], normalize=False).data
    lr_lab = load_labels(root / entry["lr_labels"], cfg.num_classes)
    gt = load_volume(root / entry["hr_image"], normalize=False).data
    gt_lab = load_labels(root / entry["hr_labels"], cfg.num_classes).data
    lo, hi = float(lr_raw.min()), float(lr_raw.max())
    gt = (gt - lo) / (hi - lo) if hi > lo else gt - lo
    bsp = bspline_upsample(lr, cfg.r)
    nn_lab = nn_upsample_labels(lr_lab, cfg.r).data
    sr = bundle.image.data
    row = {
        "psnr_sr": metrics.psnr(sr, gt), "psnr_bspline": metrics.psnr(bsp, gt),
        "ssim_sr": metrics.ssim(sr, gt), "ssim_bspline": metrics.ssim(bsp, gt),
        "dsc_sr_labels": metrics.dice(bundle.labels.data, gt_lab),
        "dsc_nn_labels": metrics.dice(nn_lab, gt_lab),
    }
    try:
        row["unc_err_corr"] = metrics.uncertainty_error_correlation(bundle.uncertainty, sr, gt)
    except metrics.MetricError:
        row["unc_err_corr"] = None
    return row


def seg_case_metrics(cfg: ExperimentConfig, entry: dict, ckpt: SegCheckpoint, model=None) -> dict:
    root = data_dir(cfg)
    lr, lr_lab = load_lr_case(cfg, entry)
    gt_lab = load_labels(root / entry["hr_labels"], cfg.num_classes)
    lr_mask, hr_mask = infer_segmenter(lr, ckpt, model=model)
    hr_source = "hr_head"
    if hr_mask is None:
        hr_mask, hr_source = nn_upsample_labels(lr_mask, cfg.r), "nn_upsampled"
    lr_m = mask_metrics(lr_mask.data, lr_lab.data, lr.spacing)
    hr_m = mask_metrics(hr_mask.data, gt_lab.data, gt_lab.spacing)
    return {"dsc_lr": lr_m["dsc"], "hd95_lr": lr_m["hd95"], "dsc_hr": hr_m["dsc"],
            "hd95_hr": hr_m["hd95"], "hr_source": hr_source}


def summarize(rows: list[dict], keys) -> dict:
    out = {}
    for k in keys:
        vals = [r[k] for r in rows if isinstance(r.get(k), (int, float)) and r[k] is not None]
        out[k] = {"mean": float(np.mean(vals)) if vals else None,
                  "std": float(np.std(vals)) if vals else None,
                  "n": len(vals), "failures": len(rows) - len(vals)}
    return out


def write_table(rows: list[dict], path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fieldnames = list(rows[0]) if rows else ["case"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: ("" if v is None else v) for k, v in row.items()})


SR_KEYS = ("psnr_sr", "psnr_bspline", "ssim_sr", "ssim_bspline", "dsc_sr_labels", "dsc_nn_labels", "unc_err_corr")
SEG_KEYS = ("dsc_lr", "hd95_lr", "dsc_hr", "hd95_hr")


def eval_selfsr(cfg: ExperimentConfig) -> dict:
    manifest = load_manifest(cfg)
    pm = {e["id"]: e for e in load_pseudo_manifest(cfg)["cases"]}
    rows = []
    for entry in manifest["cases"]:
        row = {"case": entry["id"], "split": entry["split"]}
        row.update(sr_case_metrics(cfg, entry, load_bundle(cfg, pm[entry["id"]])))
        rows.append(row)
    out = cfg.root / "eval" / "selfsr"
    write_table(rows, out / "metrics.csv")
    summary = {"all": summarize(rows, SR_KEYS),
               "val": summarize([r for r in rows if r["split"] == "val"], SR_KEYS),
               "n_cases": len(rows)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def eval_seg_run(cfg: ExperimentConfig, run: str) -> dict:
    ckpt = SegCheckpoint.load(seg_root(cfg) / run)
    model = ckpt.model()
    manifest = load_manifest(cfg)
    rows = []
    for entry in manifest["cases"]:
        if entry["split"] != "val":
            continue
        rows.append({"case": entry["id"], **seg_case_metrics(cfg, entry, ckpt, model)})
    out = cfg.root / "eval" / run
    write_table(rows, out / "metrics.csv")
    summary = {"run": run, "config": json.loads((seg_root(cfg) / run / "manifest.json").read_text())["config"],
               "metrics": summarize(rows, SEG_KEYS), "n_cases": len(rows)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return summary


def run_eval(cfg: ExperimentConfig) -> dict:
    """Evaluate the self-SR outputs (if present) and every trained segmenter run."""
    result = {"selfsr": None, "segmentation": {}}
    if (pseudo_dir(cfg) / "manifest.json").exists():
        result["selfsr"] = eval_selfsr(cfg)
    if seg_root(cfg).exists():
        for run_dir in sorted(p for p in seg_root(cfg).iterdir() if (p / "manifest.json").exists()):
            result["segmentation"][run_dir.name] = eval_seg_run(cfg, run_dir.name)["metrics"]
    out = cfg.root / "eval"
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def format_mean_std(stat: dict, digits: int = 4) -> str:
    if stat["mean"] is None or (isinstance(stat["mean"], float) and math.isnan(stat["mean"])):
        return "-"
    return f"{stat['mean']:.{digits}f}±{stat['std']:.{digits}f}"
