"""Command-line entry point: ``misnet {train,eval,predict,ablate,report}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import engine
from .backbone import DESCRIPTORS
from .core import ConfigError
from .metrics import MetricReport

log = logging.getLogger("misnet")


def _run_config(args) -> engine.RunConfig:
    cfg = engine.RunConfig.load(args.config) if args.config else engine.RunConfig()
    model, train = {}, {}
    if args.backbone:
        model["backbone_id"] = args.backbone
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("seed", "seed")):
        value = getattr(args, flag, None)
        if value is not None:
            train[key] = value
    return cfg.with_overrides(model, train)


def _add_run_flags(p):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--backbone", choices=sorted(DESCRIPTORS))
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--force", action="store_true", help="resume even if the config hash differs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misnet", description="Polyp segmentation: train, evaluate, predict.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_run_flags(p)

    p = sub.add_parser("ablate", help="train one model per ablation variant")
    _add_run_flags(p)
    p.add_argument("--variants", nargs="+", default=list(engine.ABLATIONS),
                   help=f"any of: {', '.join(engine.ABLATIONS)}")

    p = sub.add_parser("eval", help="score predictions against ground-truth masks")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path)
    p.add_argument("--data-root", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--threshold-mode", choices=("fixed", "adaptive"), default="fixed")
    p.add_argument("--force", action="store_true", help="accept a checkpoint whose config hash differs")

    p = sub.add_parser("predict", help="write probability maps for a directory of images")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--images", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("report", help="merge per-dataset CSVs into one markdown table")
    p.add_argument("csvs", type=Path, nargs="+")
    p.add_argument("--out", type=Path)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, engine.CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"misnet {args.command}: error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "train":
        arts = engine.train(_run_config(args), args.data_root, args.out, resume=args.resume, force=args.force)
        print(f"epochs={arts.epochs_done} best_val_mdice={arts.best_val_mdice:.4f} out={arts.run_dir}")
    elif args.command == "ablate":
        runs = engine.ablate(_run_config(args), args.variants, args.data_root, args.out, resume=args.resume,
                             force=args.force)
        for name, arts in runs.items():
            print(f"variant={name} best_val_mdice={arts.best_val_mdice:.4f}")
    elif args.command == "eval":
        reports = engine.evaluate(args.data_root, args.out, checkpoint=args.checkpoint,
                                  predictions=args.predictions, threshold_mode=args.threshold_mode,
                                  force=args.force)
        for report in reports.values():
            print(report.to_markdown())
    elif args.command == "predict":
        model, _ = engine.model_from_checkpoint(args.checkpoint, force=args.force)
        written = engine.predict(model, engine.image_paths(args.images), args.out)
        print(f"wrote {len(written)} maps to {args.out}")
    elif args.command == "report":
        text = "\n".join(MetricReport.read_csv(p).to_markdown() for p in args.csvs)
        if args.out:
            args.out.write_text(text)
        print(text)
    return 0


if __name__ == "__main__":
    sys.exit(main())
