"""Command-line entry point: ``infoclust {run,eval,probe,finetune,montage}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

from infoclust import trainer
from infoclust.config import PRESETS, ExperimentConfig, preset


def _config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
        if args.preset:
            base = preset(args.preset, cfg.dataset)
            cfg = cfg.with_(name=base.name, terms=base.terms, heads=base.heads, transforms={**base.transforms, **cfg.transforms})
    elif args.preset:
        cfg = preset(args.preset, args.dataset or "mnist")
    else:
        raise SystemExit("run: give --config and/or --preset")
    changes = {k: v for k, v in (("dataset", args.dataset), ("epochs", args.epochs), ("seed", args.seed), ("out_dir", args.out)) if v is not None}
    if "dataset" in changes and changes["dataset"] != cfg.dataset and args.preset:
        cfg = preset(args.preset, changes["dataset"], **{k: v for k, v in changes.items() if k != "dataset"})
    elif changes:
        cfg = cfg.with_(**changes)
    return cfg


def _run(args) -> dict:
    cfg = _config(args)
    if args.seeds > 1:
        return trainer.run_seeds(cfg, args.seeds, resume=args.resume)
    result = trainer.run(cfg, resume=args.resume)
    final = result.final if result.records else None
    return {"out_dir": str(result.out_dir), "epoch": result.estimator.epoch_, "selected_acc": final.selected_acc if final else None}


def _finetune(args) -> dict:
    kw = dict(augment=args.augment, epochs=args.epochs, n_labels=args.labels, seed=args.seed)
    pre = trainer.finetune(args.checkpoint, args.dataset, **kw)
    out = {"pretrained": asdict(pre)}
    if args.baseline:
        out["scratch"] = asdict(trainer.finetune(args.checkpoint, args.dataset, scratch=True, **kw))
    return out


def _montage(args) -> dict:
    tiles = trainer.montage(args.checkpoint, args.dataset, args.per_cluster, args.out, seed=args.seed)
    return {"files": [str(m.path) for m in tiles]}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infoclust", description="Information-based deep clustering.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="train a configuration")
    p.add_argument("--config", help="JSON experiment config")
    p.add_argument("--preset", choices=PRESETS)
    p.add_argument("--dataset", choices=("mnist", "cifar10", "svhn", "blobs"))
    p.add_argument("--seeds", type=int, default=1, help="independent runs with consecutive seeds")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", help="output directory root")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in the run directory")
    p.set_defaults(func=_run)

    p = sub.add_parser("eval", help="cluster accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.set_defaults(func=lambda a: trainer.evaluate(a.checkpoint, a.dataset))

    p = sub.add_parser("probe", help="linear probe on frozen features")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--tap", choices=("fc", "conv", "y"), default="fc")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=lambda a: trainer.probe(a.checkpoint, a.dataset, a.tap, a.seed))

    p = sub.add_parser("finetune", help="supervised training from a pretrained encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--augment", action="store_true", help="geometric augmentation of labelled batches")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--labels", type=int, help="number of labelled training samples")
    p.add_argument("--baseline", action="store_true", help="also train from scratch with the same budget")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_finetune)

    p = sub.add_parser("montage", help="image grid of cluster members")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset")
    p.add_argument("--per-cluster", type=int, default=8)
    p.add_argument("--out", help="directory for the PNG files (default: next to the checkpoint)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_montage)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = args.func(args)
    except (FileNotFoundError, ValueError, KeyError, RuntimeError) as err:
        print(f"infoclust {args.command}: {err}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
