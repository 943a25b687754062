"""Command line for the few-shot segmentation toolkit.

Exit codes: 0 success, 1 validation errors found, 2 usage error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import config as cfgmod
from . import plotting
from .data import (DatasetRegistry, SplitSpec, binarize_multiclass_dataset, build_splits,
                   build_synthetic_dataset, compute_stats, holdout_split, validate_registry,
                   write_class)
from .episodes import EpisodeSpec, sample_class_episode
from .model import load_checkpoint
from .training import (cross_dataset_protocol, evaluate, kshot_ablation, model_predictor,
                       superclass_table, train)
from .workflow import (SupportSet, auto_label, list_corpus, load_corrections, merge_support_set,
                       mine_hard_cases, write_manifest)

log = logging.getLogger("fewshotseg")

S = argparse.SUPPRESS


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self)


def _common(p, *keys):
    """Flags that map onto RunConfig keys; absent flags leave the key untouched."""
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--seed", type=int, default=S)
    p.add_argument("--out", default=S)
    p.add_argument("--workers", type=int, default=S)
    flags = {
        "dataset": dict(), "splits_file": dict(), "checkpoint": dict(),
        "k_shot": dict(type=int), "n_query": dict(type=int),
        "preset": dict(), "n_stages": dict(type=int), "base_channels": dict(type=int),
        "channel_growth": dict(type=int), "convs_per_stage": dict(type=int),
        "relation_hidden": dict(type=int), "relation_channels": dict(type=int),
        "max_channels": dict(type=int),
        "loss": dict(choices=["bce", "mse"]), "lr0": dict(type=float),
        "fine_tune_lr": dict(type=float), "halve_every": dict(type=int),
        "n_episodes": dict(type=int), "checkpoint_every": dict(type=int),
        "eval_every": dict(type=int), "eval_episodes_per_class": dict(type=int),
        "overfit": dict(action="store_true"),
        "split": dict(choices=["train", "val", "test"]), "episodes_per_class": dict(type=int),
        "threshold": dict(type=float), "k_values": dict(),
        "per_super_val": dict(type=int), "per_super_test": dict(type=int), "holdout": dict(type=int),
        "n_classes": dict(type=int), "distractors": dict(type=int),
    }
    for key in keys:
        p.add_argument("--" + key.replace("_", "-"), dest=key, default=S, **flags[key])


MODEL_FLAGS = ("preset", "n_stages", "base_channels", "channel_growth", "convs_per_stage",
               "relation_hidden", "relation_channels", "max_channels")
TRAIN_FLAGS = ("dataset", "splits_file", "k_shot", "n_query", "loss", "lr0", "halve_every",
               "n_episodes", "checkpoint_every", "eval_every", "eval_episodes_per_class", "overfit")
EVAL_FLAGS = ("episodes_per_class", "threshold")


def build_parser():
    parser = _Parser(prog="fewshotseg", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("validate", help="check a dataset root against the collection rules")
    _common(p, "dataset")

    p = sub.add_parser("splits", help="write a class-disjoint train/val/test split file")
    _common(p, "dataset", "per_super_val", "per_super_test", "holdout")

    p = sub.add_parser("stats", help="per-class counts and superclass distribution")
    _common(p, "dataset")

    p = sub.add_parser("synth", help="generate a synthetic shapes dataset")
    _common(p, "n_classes", "distractors")

    p = sub.add_parser("binarize", help="convert multi-class label maps into one binary class")
    _common(p)
    p.add_argument("--images", required=True, help="directory of images")
    p.add_argument("--labels", required=True, help="directory of label maps named like the images")
    p.add_argument("--target", type=int, required=True)
    p.add_argument("--name", default=None, help="class directory name")

    p = sub.add_parser("train", help="episodic training")
    _common(p, *TRAIN_FLAGS, *MODEL_FLAGS)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")

    p = sub.add_parser("eval", help="mean IoU of a checkpoint on a split")
    _common(p, "checkpoint", "dataset", "splits_file", "k_shot", "n_query", "split", *EVAL_FLAGS)

    p = sub.add_parser("ablate-k", help="train and evaluate one model per support-set size")
    _common(p, *TRAIN_FLAGS, *MODEL_FLAGS, "k_values", "episodes_per_class")

    p = sub.add_parser("protocol", help="multi-stage training then evaluation on several test sets")
    _common(p, *TRAIN_FLAGS[2:], *MODEL_FLAGS, "fine_tune_lr", "episodes_per_class")
    p.add_argument("--stage", nargs=2, action="append", metavar=("DATASET", "SPLITS"), required=True)
    p.add_argument("--eval-set", nargs=3, action="append", metavar=("NAME", "DATASET", "SPLITS"),
                   required=True)

    p = sub.add_parser("label", help="auto-label a corpus from a support set")
    _common(p, "checkpoint", "threshold")
    p.add_argument("--support", required=True, help="support set directory")
    p.add_argument("--corpus", required=True, help="directory of images to label")

    p = sub.add_parser("mine", help="rank auto-labelled images, worst first")
    _common(p)
    p.add_argument("--predictions", required=True, help="output directory of 'label'")
    p.add_argument("--truths", default=None, help="directory of <stem>.png ground-truth masks")
    p.add_argument("-n", type=int, default=5)

    p = sub.add_parser("merge-support", help="fold corrected masks into a new support set version")
    _common(p)
    p.add_argument("--support", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--corrected", required=True, help="directory of <stem>.png corrected masks")
    return parser


def _resolve(args):
    overrides = {k: v for k, v in vars(args).items()
                 if k in cfgmod.RunConfig.__dataclass_fields__ and v is not None}
    return cfgmod.resolve(args.config, overrides)


def _need(run, *keys):
    for key in keys:
        if getattr(run, key) in (None, ""):
            raise UsageError(f"--{key.replace('_', '-')} is required")


RESOLVED = "resolved_config.txt"


def _out(run, default):
    """Create the output directory and record the resolved config in it."""
    out = Path(run.out or default)
    out.mkdir(parents=True, exist_ok=True)
    run.save(out / RESOLVED)
    return out


def _split(run, registry):
    if run.splits_file:
        return SplitSpec.load(run.splits_file)
    return SplitSpec(tuple(registry.names), (), (), run.seed)


def cmd_validate(run):
    _need(run, "dataset")
    report = validate_registry(run.dataset, workers=run.workers)
    if run.out:
        report.to_csv(run.out)
        run.save(Path(run.out).parent / RESOLVED)
    else:
        w = csv.writer(sys.stdout)
        w.writerow(["path", "rule_id", "severity", "message"])
        for f in report.findings:
            w.writerow([f.path, f.rule_id, f.severity, f.message])
    for rule, n in sorted(report.summary().items()):
        print(f"{rule}: {n}", file=sys.stderr)
    return 0 if report.conforms else 1


def cmd_splits(run):
    _need(run, "dataset")
    registry = DatasetRegistry.open(run.dataset)
    if run.holdout:
        spec = holdout_split(registry, run.holdout, seed=run.seed)
    else:
        spec = build_splits(registry, run.per_super_val, run.per_super_test, run.seed)
    # --out names the file when it ends in .txt, otherwise the directory for it
    out = Path(run.out or run.dataset)
    if out.suffix != ".txt":
        out = out / SplitSpec.filename(run.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    spec.save(out)
    run.save(out.parent / RESOLVED)
    for split in ("train", "val", "test"):
        names = spec.classes(split)
        print(f"{split}\t{len(names)} classes\t{sum(registry.n_pairs(n) for n in names)} pairs")
    return 0


def cmd_stats(run):
    _need(run, "dataset")
    registry = DatasetRegistry.open(run.dataset)
    stats = compute_stats(registry)
    print(f"classes\t{len(stats.counts)}\nmean\t{stats.mean:g}\nstddev\t{stats.std:g}")
    if run.out:
        out = _out(run, ".")
        with open(out / "class_counts.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["class", "n"])
            w.writerows(sorted(stats.counts.items()))
        with open(out / "distribution.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["superclass", "share"])
            w.writerows((k, repr(v)) for k, v in stats.distribution.items())
        plotting.plot_distribution(stats.distribution, out / "distribution.png")
    return 0


def cmd_synth(run):
    _need(run, "out")
    registry = build_synthetic_dataset(run.n_classes, run.seed, run.out, distractors=run.distractors)
    run.save(Path(run.out) / RESOLVED)
    print(f"{len(registry)} classes written to {run.out}")
    return 0


def cmd_binarize(run, args):
    _need(run, "out")
    images, labels, names = [], [], []
    for path in sorted(Path(args.images).iterdir()):
        matches = [q for q in Path(args.labels).glob(path.stem + ".*")]
        if not matches:
            continue
        images.append(np.asarray(Image.open(path).convert("RGB")))
        labels.append(np.asarray(Image.open(matches[0])))
        names.append(path.name)
    if not images:
        raise UsageError("no image/label map pairs found")
    name = args.name or f"class-{args.target}"
    pairs = binarize_multiclass_dataset(images, labels, args.target, name=name)
    write_class(pairs, Path(run.out) / name)
    run.save(Path(run.out) / RESOLVED)
    print(f"{len(pairs)} of {len(images)} images kept for class {args.target}")
    return 0


def _report_outputs(report, out, stem, title):
    report.to_csv(out / f"{stem}.csv")
    plotting.plot_superclass_iou({stem: report}, out / f"{stem}.png", title=title)
    print(f"mean IoU (macro)\t{report.global_mean:.4f}\nmean IoU (micro)\t{report.micro_mean:.4f}")


def cmd_train(run, args):
    _need(run, "dataset")
    out = _out(run, "run")
    registry = DatasetRegistry.open(run.dataset)
    split = _split(run, registry)
    result = train(registry, split, run.model_config(), run.train_config(), out_dir=out,
                   resume=args.resume)
    plotting.plot_loss_trace(result.trace, out / "loss_trace.png")
    if result.val_trace:
        with open(out / "val_trace.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["episode", "mean_iou"])
            w.writerows(result.val_trace)
    print(f"checkpoint\t{result.checkpoint}\nepisodes\t{result.episode}")
    return 0


def cmd_eval(run):
    _need(run, "checkpoint", "dataset")
    out = _out(run, "eval")
    registry = DatasetRegistry.open(run.dataset)
    split = _split(run, registry)
    classes = split.classes(run.split) or registry.names
    model, _ = load_checkpoint(run.checkpoint)
    report = evaluate(model, registry, classes, run.k_shot, run.episodes_per_class, run.seed,
                      n_query=run.n_query, threshold=run.threshold)
    _report_outputs(report, out, "metrics", f"{run.k_shot}-shot mean IoU by superclass")
    first = sample_class_episode(registry, classes[0], EpisodeSpec(run.k_shot, run.n_query, run.seed), 0)
    plotting.plot_episode(first, model_predictor(model)(first), out / "example_episode.png", run.threshold)
    return 0


def cmd_ablate(run):
    _need(run, "dataset")
    out = _out(run, "ablation")
    registry = DatasetRegistry.open(run.dataset)
    split = _split(run, registry)
    reports = kshot_ablation(registry, split, run.model_config(), run.train_config(), run.k_list(),
                             run.episodes_per_class, out_dir=out)
    labels = {f"k={k}": r for k, r in reports.items()}
    with open(out / "comparison.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["superclass", *labels])
        for name, vals in superclass_table(labels):
            w.writerow([name, *(repr(vals[label]) for label in labels)])
    plotting.plot_superclass_iou(labels, out / "comparison.png", title="Mean IoU by superclass and K")
    for label, r in labels.items():
        print(f"{label}\t{r.global_mean:.4f}")
    return 0


def cmd_protocol(run, args):
    out = _out(run, "protocol")
    stages = []
    for dataset, splits in args.stage:
        registry = DatasetRegistry.open(dataset)
        stages.append((registry, SplitSpec.load(splits)))
    evals = {name: (DatasetRegistry.open(dataset), SplitSpec.load(splits))
             for name, dataset, splits in args.eval_set}
    result = cross_dataset_protocol(stages, evals, run.model_config(), run.train_config(),
                                    run.episodes_per_class, run.fine_tune_lr, out_dir=out)
    plotting.plot_superclass_iou(result.reports, out / "protocol.png", title="Mean IoU per test set")
    for i, lr in enumerate(result.stage_lrs, start=1):
        print(f"stage {i}\tlr0 {lr:g}")
    for name, r in result.reports.items():
        print(f"{name}\t{r.global_mean:.4f}")
    return 0


def cmd_label(run, args):
    _need(run, "checkpoint")
    out = _out(run, "labels")
    support = SupportSet.load(args.support)
    corpus = list_corpus(args.corpus)
    results = auto_label(run.checkpoint, support, corpus, threshold=run.threshold, out_dir=out)
    print(f"{len(results)} images labelled with support set v{support.version} ({len(support)} pairs)")
    return 0


def cmd_mine(run, args):
    pred_dir = Path(args.predictions)
    probs = np.load(pred_dir / "probs.npz")
    with open(pred_dir / "labels.csv", newline="") as f:
        rows = list(csv.DictReader(f))
    refs = [r["image_path"] for r in rows]
    preds = [probs[Path(r["mask_path"]).name.removesuffix(".mask.png")] for r in rows]
    truths = None
    if args.truths:
        truths = []
        for ref in refs:
            m = np.asarray(Image.open(Path(args.truths) / f"{Path(ref).stem}.png").convert("L"))
            if m.shape != preds[0].shape:
                m = np.asarray(Image.fromarray(m).resize(preds[0].shape[::-1], Image.NEAREST))
            truths.append((m > 127).astype(np.uint8))
    cases = mine_hard_cases(preds, truths, args.n, refs)
    out = Path(run.out) if run.out else pred_dir / "hard_cases.csv"
    write_manifest(cases, out)
    run.save(out.parent / RESOLVED)
    for rank, c in enumerate(cases, start=1):
        print(f"{rank}\t{c.image_ref}\t{c.score:.4f}")
    return 0


def cmd_merge(run, args):
    _need(run, "out")
    old = SupportSet.load(args.support)
    corrected = load_corrections(list_corpus(args.corpus), args.corrected)
    new = merge_support_set(old, corrected)
    new.save(run.out)
    run.save(Path(run.out) / RESOLVED)
    print(f"support set v{new.version}: {len(new)} pairs ({len(corrected)} corrected)")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        run = _resolve(args)
        handlers = {
            "validate": lambda: cmd_validate(run),
            "splits": lambda: cmd_splits(run),
            "stats": lambda: cmd_stats(run),
            "synth": lambda: cmd_synth(run),
            "binarize": lambda: cmd_binarize(run, args),
            "train": lambda: cmd_train(run, args),
            "eval": lambda: cmd_eval(run),
            "ablate-k": lambda: cmd_ablate(run),
            "protocol": lambda: cmd_protocol(run, args),
            "label": lambda: cmd_label(run, args),
            "mine": lambda: cmd_mine(run, args),
            "merge-support": lambda: cmd_merge(run, args),
        }
        return handlers[args.command]()
    except UsageError as e:
        (e.args[1] if len(e.args) > 1 else parser).print_usage(sys.stderr)
        print(f"fewshotseg: error: {e.args[0]}", file=sys.stderr)
        return 2
    except (FileNotFoundError, NotADirectoryError, cfgmod.ConfigError) as e:
        print(f"fewshotseg: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
