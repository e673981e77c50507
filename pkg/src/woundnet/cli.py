"""Command-line surface: train / eval / predict / gradcheck / synth-data.

Exit codes: 0 success, 1 operational error, 2 gradient-verification failure.
Stdout carries machine-parseable artifacts only (JSON / CSV-adjacent lines);
progress goes to stderr.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import gradcheck
from .data import load_manifest, save_dataset, split_dataset, synth_generate
from .errors import CheckpointError, ConfigError, ManifestError, ShapeError, TrainingError
from .trainer import (TrainConfig, evaluate, load_checkpoint, load_config, predict,
                      train, write_epoch_csv)


def _cmd_train(args) -> int:
    overrides = {"checkpoint_path": args.out}
    config = load_config(args.config, **overrides) if args.config else TrainConfig(**overrides)
    dataset = split_dataset(load_manifest(args.manifest), config.val_fraction, config.seed)

    def progress(log):
        print(f"epoch {log.epoch}: cls={log.cls_loss:.6f} seg={log.seg_loss:.6f} "
              f"total={log.total_loss:.6f} ({log.seconds:.2f}s)", file=sys.stderr)

    ckpt, logs = train(config, dataset, progress=progress)
    log_path = args.log or str(Path(args.out).with_suffix("")) + "_epochs.csv"
    write_epoch_csv(logs, log_path)
    print(f"best total loss {ckpt.best_total_loss!r} at epoch {ckpt.epoch}; "
          f"checkpoint: {args.out}; epoch log: {log_path}", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    dataset = split_dataset(load_manifest(args.manifest),
                            ckpt.config.val_fraction, ckpt.config.seed)
    report = evaluate(ckpt, dataset, args.split, threshold=args.threshold)
    print(report.to_json())
    return 0


def _cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    name, probs, _ = predict(ckpt, args.image, args.out, threshold=args.threshold)
    print(name)
    for cls, p in zip(("foot_ulcer", "infected_wound", "leg_ulcer", "pressure_ulcer"), probs):
        print(f"{cls} {p:.6f}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck.full_suite(args.seed)
    failures = []
    for res in results:
        status = "ok" if res.passed else "FAIL"
        print(f"{res.name:<18} max_rel_err={res.max_rel_err:.3e} tol={res.tolerance:.0e} {status}")
        if not res.passed:
            failures.append(res.name)
    if failures:
        print(f"gradient check failed: {', '.join(failures)}", file=sys.stderr)
        return 2
    return 0


def _cmd_synth(args) -> int:
    out_dir = Path(args.out)
    dataset = synth_generate(args.n, args.seed)
    manifest = save_dataset(dataset, out_dir)
    print(manifest)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="woundnet",
        description="Dual-head U-Net wound classifier/segmenter: batch training, "
                    "evaluation, and gradient verification.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a dataset manifest")
    p.add_argument("--config", help="key = value config file (defaults if omitted)")
    p.add_argument("--manifest", required=True, help="dataset manifest CSV")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--log", help="epoch CSV path (default: <out>_epochs.csv)")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("predict", help="classify one image and write its mask PNG")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output mask PNG path")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference verification of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("synth-data", help="write a synthetic dataset (PNGs + manifest)")
    p.add_argument("--n", type=int, required=True, help="samples per class")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else 1
    try:
        return args.func(args)
    except (ManifestError, ConfigError, CheckpointError, TrainingError, ShapeError,
            ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
