"""Command line entry point: ``rehrseg <stage> --config cfg.json``.

Exit codes: 0 success, 2 configuration error, 3 runtime or training failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import pipeline
from .config import ConfigError, load_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

log = logging.getLogger("rehrseg")


def cmd_phantom(cfg, args):
    manifest = pipeline.run_phantom(cfg)
    print(f"wrote {len(manifest['cases'])} cases to {pipeline.data_dir(cfg)}")


def cmd_train_sr(cfg, args):
    ckpt = pipeline.run_train_sr(cfg)
    print(f"self-SR checkpoint at iteration {ckpt.iteration}: {pipeline.selfsr_dir(cfg)}")


def cmd_superres(cfg, args):
    pm = pipeline.run_superres(cfg)
    print(f"{len(pm['cases'])} pseudo-HR bundles, {pm['n_pseudo_lr']} pseudo-LR samples in {pipeline.pseudo_dir(cfg)}")


def cmd_train_seg(cfg, args):
    for path in pipeline.run_train_seg(cfg):
        print(f"segmenter checkpoint: {path}")


def cmd_infer(cfg, args):
    if not args.case:
        raise ConfigError("infer needs --case")
    try:
        paths = pipeline.run_infer(cfg, args.case, args.run)
    except pipeline.CaseNotFound as exc:
        raise ConfigError(str(exc.args[0])) from exc
    for kind, path in paths.items():
        print(f"{kind}: {path}")


def cmd_eval(cfg, args):
    result = pipeline.run_eval(cfg)
    if result["selfsr"]:
        s = result["selfsr"]["all"]
        print("self-SR      PSNR        SSIM        label DSC")
        print(f"  self-SR    {pipeline.format_mean_std(s['psnr_sr'], 2):12s}{pipeline.format_mean_std(s['ssim_sr'])}  "
              f"{pipeline.format_mean_std(s['dsc_sr_labels'])}")
        print(f"  B-spline   {pipeline.format_mean_std(s['psnr_bspline'], 2):12s}{pipeline.format_mean_std(s['ssim_bspline'])}  "
              f"{pipeline.format_mean_std(s['dsc_nn_labels'])}")
    if result["segmentation"]:
        print(f"{'run':32s} DSC (LR)        HD95 (LR)       DSC (HR)        HD95 (HR)")
        for run, m in result["segmentation"].items():
            cols = [pipeline.format_mean_std(m[k], 4 if k.startswith("dsc") else 2) for k in pipeline.SEG_KEYS]
            print(f"{run:32s} " + " ".join(f"{c:15s}" for c in cols))


COMMANDS = {
    "phantom": cmd_phantom,
    "train-sr": cmd_train_sr,
    "superres": cmd_superres,
    "train-seg": cmd_train_seg,
    "infer": cmd_infer,
    "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="rehrseg", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment JSON config")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted config override, e.g. seg.lambda=0.1 (repeatable)")
    parser.add_argument("--case", help="case id (infer)")
    parser.add_argument("--run", help="segmenter run name (infer); defaults to the configured run")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_config(args.config, args.override, args.seed)
        COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - every other failure maps to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
