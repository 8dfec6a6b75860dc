"""Command-line entry point: ``bandprobe {synth,train,eval,permute,report,replay}``.

Every command writes ``config.json`` into ``--out``; ``bandprobe replay
config.json --out DIR`` re-executes it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import bands as B
from . import dataio, trainer, unet
from .metrics import METRIC_NAMES, evaluate_set
from .permutation import ImportanceReport, importance_report
from .report import render_bar_chart

log = logging.getLogger("bandprobe")

PATH_ARGS = ("manifest", "checkpoint", "importance")
NOT_ECHOED = ("out", "func", "verbose")


class CommandError(RuntimeError):
    pass


def _default_threads():
    try:
        return max(1, int(os.environ.get("BANDPROBE_THREADS", "1")))
    except ValueError:
        return 1


def _write(out, name, text):
    path = Path(out) / name
    path.write_text(text)
    return path


def _dump_json(obj):
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def _echo(args):
    record = {k: v for k, v in vars(args).items() if k not in NOT_ECHOED}
    return {"command": args.command, "args": record}


def _load_split(manifest_path, split):
    manifest = dataio.load_manifest(manifest_path)
    samples = manifest.load_split(split)
    if not samples:
        raise CommandError(f"split {split!r} of {manifest_path} is empty")
    return manifest, samples


# -- commands --------------------------------------------------------------


def cmd_synth(args):
    spec = dataio.SynthSpec(
        num_samples=args.samples,
        height=args.size,
        width=args.size,
        generative_band=args.band,
        threshold=args.threshold,
        noise_scale=args.noise_scale,
        seed=args.seed,
    )
    samples = dataio.generate_synthetic(spec)
    splits = dataio.assign_splits(len(samples), args.val_fraction, args.test_fraction)
    path = dataio.write_dataset(samples, splits, args.out)
    log.info("wrote %d samples and %s", len(samples), path)


def cmd_train(args):
    manifest = dataio.load_manifest(args.manifest)
    train_set = manifest.load_split("train")
    if not train_set:
        raise CommandError(f"split 'train' of {args.manifest} is empty")
    val_set = manifest.load_split("val")
    if not val_set:
        n_val = max(1, int(round(len(train_set) * args.val_fraction)))
        if n_val >= len(train_set):
            raise CommandError("no 'val' split and too few training samples to carve one")
        train_set, val_set = train_set[:-n_val], train_set[-n_val:]
        log.info("no val split; holding out the last %d training samples", n_val)
    bands = train_set[0].bands.shape[0]
    model = unet.build(unet.UNetConfig(bands, 2, args.base_width), seed=args.seed)
    config = trainer.TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        validation_fraction=args.val_fraction,
    )
    model, tlog = trainer.train(model, train_set, val_set, config)
    unet.save(model, Path(args.out) / "model.ckpt")
    _write(args.out, "trainlog.csv", tlog.to_csv())
    log.info("selected epoch %d of %d", tlog.selected_epoch, len(tlog))


def cmd_eval(args):
    model = unet.load(args.checkpoint)
    _, samples = _load_split(args.manifest, args.split)
    report = evaluate_set(model, samples, threads=args.threads)
    _write(args.out, "metrics.json", _dump_json(report.to_json()))
    _write(args.out, "metrics.csv", report.to_csv())
    for k in METRIC_NAMES:
        log.info("%s %.4f", k, report.aggregate[k])


def _band_sets(args):
    sets = B.parse_band_sets(args.bands)
    if args.groups == "default":
        sets += list(B.DEFAULT_GROUPS)
    elif args.groups and args.groups != "none":
        sets += [B.group_by_label(g.strip()) for g in args.groups.split(",")]
    if not sets:
        sets = list(B.SINGLE_BANDS)
    return sets


def cmd_permute(args):
    model = unet.load(args.checkpoint)
    _, samples = _load_split(args.manifest, args.split)
    report = importance_report(
        model, samples, _band_sets(args), repeats=args.repeats, seed=args.seed,
        joint=args.joint, metric=args.metric, threads=args.threads,
    )
    _write(args.out, "importance.json", _dump_json(report.to_json()))
    _write(args.out, "importance.csv", report.to_csv())
    _write(args.out, "importance.svg", render_bar_chart(report.entries))
    for e in report.entries:
        log.info("%-15s %8.3f pp", e.band_set.label, e.drop_pp)


def cmd_report(args):
    report = ImportanceReport.from_json(json.loads(Path(args.importance).read_text()))
    if not report.entries:
        raise CommandError(f"{args.importance} has no entries")
    kwargs = {"title": args.title} if args.title else {}
    _write(args.out, "importance.svg", render_bar_chart(report.entries, **kwargs))
    _write(args.out, "importance.csv", report.to_csv())


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "permute": cmd_permute,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="bandprobe", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=_default_threads(),
                       help="inference workers (default: $BANDPROBE_THREADS or 1)")
        if seed:
            p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="generate a synthetic single-band oracle dataset")
    p.add_argument("--samples", type=int, default=64)
    p.add_argument("--size", type=int, default=64, help="H = W, a multiple of 16")
    p.add_argument("--band", required=True, choices=B.CANONICAL_BANDS,
                   help="band that determines the mask")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--noise-scale", type=float, default=0.15)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--test-fraction", type=float, default=0.2)
    common(p)

    p = sub.add_parser("train", help="train a U-Net and keep the lowest-val-loss epoch")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--base-width", type=int, default=16)
    p.add_argument("--val-fraction", type=float, default=0.1)
    common(p)

    p = sub.add_parser("eval", help="confusion-matrix metrics on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=dataio.SPLITS)
    common(p, seed=False)

    p = sub.add_parser("permute", help="band permutation importance")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--bands", default=None,
                   help="'all', a comma list of bands, or Label=BandA+BandB items")
    p.add_argument("--groups", default=None,
                   help="'default' (index groups + VisibleLight + NotImportant), 'none', or labels")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--joint", action="store_true",
                   help="shuffle all bands of a group with one shared permutation")
    p.add_argument("--metric", default="accuracy", choices=METRIC_NAMES)
    p.add_argument("--split", default="test", choices=dataio.SPLITS)
    common(p)

    p = sub.add_parser("report", help="render importance.json as an SVG bar chart")
    p.add_argument("--importance", required=True)
    p.add_argument("--title", default=None)
    common(p, seed=False)

    p = sub.add_parser("replay", help="re-run a command from its config.json")
    p.add_argument("config")
    p.add_argument("--out", required=True)
    return parser


def run(args):
    if args.command == "replay":
        doc = json.loads(Path(args.config).read_text())
        if doc.get("command") not in COMMANDS:
            raise CommandError(f"{args.config}: unknown command {doc.get('command')!r}")
        args = argparse.Namespace(**doc["args"], out=args.out, verbose=args.verbose)
    for key in PATH_ARGS:
        if getattr(args, key, None) is not None:
            setattr(args, key, str(Path(getattr(args, key)).resolve()))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    _write(args.out, "config.json", _dump_json(_echo(args)))
    COMMANDS[args.command](args)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except (CommandError, ValueError, KeyError, RuntimeError, OSError) as exc:
        print(f"bandprobe: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
