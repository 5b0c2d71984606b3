"""Command line: ``gen-data``, ``train``, ``eval`` and ``ablate``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .config import ConfigError, dump_config, load_config
from .corruptions import corruption_domains
from .evaluate import EvaluationError, evaluate_dataset, run_ablation, write_report
from .losses import LossError
from .scenegen import DatasetError, SceneFamily, default_styles, generate_dataset, manifest_hash
from .trainer import CheckpointError, TrainingError, fit

log = logging.getLogger("promptseg")

USER_ERRORS = (ConfigError, DatasetError, EvaluationError, CheckpointError, TrainingError, LossError,
               FileNotFoundError)


def cmd_gen_data(args) -> int:
    family = SceneFamily(seed=args.seed, num_classes=args.num_classes, height=args.size, width=args.size)
    source, targets = default_styles(args.num_classes)
    extra = corruption_domains() if args.corruptions else []
    manifest = generate_dataset(family, source, targets, (args.train, args.val), args.out, extra)
    print(f"wrote {len(manifest.records)} images to {manifest.root}")
    print(f"manifest {manifest.path} sha256 {manifest_hash(manifest.path)[:16]}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.override)
    if not cfg.data.manifest:
        raise DatasetError("data.manifest is not set (use --override data.manifest=<dir>)")
    out = Path(cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))
    result = fit(cfg)
    last = result.metrics[-1] if result.metrics else None
    if last is not None:
        print(f"iter {last['iter']}: L_total {last['L_total']:.4f} L_seg {last['L_seg']:.4f}")
    print(f"checkpoint {result.checkpoint}")
    print(f"metrics {out / 'metrics.csv'}")
    return 0


def cmd_eval(args) -> int:
    report = evaluate_dataset(args.checkpoint, args.manifest, pr=args.pr, corruptions=args.corruptions)
    sys.stdout.write(report.to_text())
    if args.out:
        for path in write_report(report, args.out):
            print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, args.override)
    result = run_ablation(cfg, tuple(args.seeds), workers=args.workers)
    sys.stdout.write(result.to_text())
    out = Path(args.out or cfg.checkpoint_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(result.to_csv())
    (out / "ablation.txt").write_text(result.to_text())
    print(f"wrote {out / 'ablation.csv'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="promptseg", description="Domain-generalized segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the toy multi-domain benchmark")
    p.add_argument("--out", default="data", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--size", type=int, default=64, help="image height and width")
    p.add_argument("--train", type=int, default=64, help="source images in the train split")
    p.add_argument("--val", type=int, default=16, help="images per val domain")
    p.add_argument("--corruptions", action="store_true", help="also write the corruption val domains")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on every domain of a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--pr", action="store_true", help="add per-class PR curves and AP")
    p.add_argument("--corruptions", action="store_true", help="include corruption domains and group summary")
    p.add_argument("--out", help="directory for report.csv, report.txt and PR files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="run the four-row component ablation")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    p.add_argument("--out", help="output directory (default: train.checkpoint_dir)")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)
    try:
        return args.func(args)
    except USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
