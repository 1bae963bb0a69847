"""``mbrsep`` command line: synth, train, separate, evaluate, inspect."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from ..model_zoo import MODEL_NAMES
from .commands import cmd_evaluate, cmd_inspect, cmd_separate, cmd_separate_manifest
from .report import plot_loss_curve
from .synth import cmd_synth
from .training import TrainConfig, train


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _labelled_dir(text: str) -> tuple[str, str]:
    label, sep, path = text.partition("=")
    if not sep:
        return Path(text).name or "model", text
    return label, path


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbrsep", description="Singing-voice separation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a toy dataset and manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--songs", type=int, default=12)
    p.add_argument("--duration", type=float, default=10.0, help="seconds per song")
    p.add_argument("--seed", type=_seed, default=0)

    p = sub.add_parser("train", help="train a model on the manifest's train/valid splits")
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="TrainConfig JSON; flags below override it")
    p.add_argument("--model", choices=sorted(MODEL_NAMES))
    p.add_argument("--seed", type=_seed)
    p.add_argument("--epochs", type=int, help="override max_epochs")
    p.add_argument("--out", required=True, help="checkpoint path; history CSV and loss plot go alongside")

    p = sub.add_parser("separate", help="estimate vocals with a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input", help="mixture WAV")
    src.add_argument("--manifest", help="separate every song of --split instead")
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True, help="output WAV (with --input) or directory (with --manifest)")

    p = sub.add_parser("evaluate", help="BSS-Eval metrics for estimate directories")
    p.add_argument("--manifest", required=True)
    p.add_argument("--estimates", action="append", type=_labelled_dir, required=True,
                   help="LABEL=DIR holding <song_id>.wav files; repeatable")
    p.add_argument("--no-baseline", action="store_true", help="skip the mixture-as-estimate rows")
    p.add_argument("--split", default="test")
    p.add_argument("--filter-len", type=int, default=512)
    p.add_argument("--out", required=True, help="directory for metrics.csv, summary.json and metrics.png")

    p = sub.add_parser("inspect", help="print the layer table and parameter count of a model")
    p.add_argument("--model", required=True, choices=sorted(MODEL_NAMES))
    return parser


def _train(args) -> int:
    data = json.loads(Path(args.config).read_text()) if args.config else {}
    if args.model:
        data["model"] = args.model
    if args.seed is not None:
        data["seed"] = args.seed
    if args.epochs is not None:
        data["max_epochs"] = args.epochs
    config = TrainConfig.from_dict(data)
    out = Path(args.out)

    def progress(rec):
        print(f"epoch {rec['epoch']:3d}  lr {rec['learning_rate']:.3g}  train {rec['train_loss']:.6g}  "
              f"valid {rec['valid_loss']:.6g}  ({rec['seconds']:.1f}s)", flush=True)

    result = train(config, args.manifest, out, on_epoch=progress)
    history_path = out.with_suffix(".history.csv")
    with open(history_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(result.history[0]))
        writer.writeheader()
        writer.writerows(result.history)
    plot_loss_curve(result.history, out.with_suffix(".loss.png"))
    print(f"best epoch {result.checkpoint.epoch}  valid {result.checkpoint.best_val_loss:.6g}  -> {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "synth":
            manifest = cmd_synth(args.out, args.songs, args.duration, args.seed)
            counts = {s: sum(e["split"] == s for e in manifest["entries"]) for s in ("train", "valid", "test")}
            print(f"wrote {len(manifest['entries'])} songs to {args.out} "
                  f"(train {counts['train']}, valid {counts['valid']}, test {counts['test']})")
        elif args.command == "train":
            return _train(args)
        elif args.command == "separate":
            if args.input:
                cmd_separate(args.checkpoint, args.input, args.out)
                print(f"wrote {args.out}")
            else:
                paths = cmd_separate_manifest(args.checkpoint, args.manifest, args.out, args.split)
                print(f"wrote {len(paths)} estimates to {args.out}")
        elif args.command == "evaluate":
            result = cmd_evaluate(args.manifest, dict(args.estimates), args.out, not args.no_baseline, args.split,
                                  args.filter_len)
            for model, stats in result.summary["models"].items():
                print(f"{model:<12} median SDR {stats['sdr_db']['median']:8.3f}  SIR {stats['sir_db']['median']:8.3f}"
                      f"  SAR {stats['sar_db']['median']:8.3f}  (n={stats['sdr_db']['n']})")
            if result.missing:
                print(f"missing {len(result.missing)} estimate file(s):", file=sys.stderr)
                for path in result.missing:
                    print(f"  {path}", file=sys.stderr)
                return 2
        elif args.command == "inspect":
            print(cmd_inspect(args.model))
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
