"""Command-line entry point: data generation, ingestion, training, captioning
and evaluation. One subcommand per stage; every run is seed-reproducible and
every artifact records the resolved configuration and tool version.

Config files are JSON with optional sections ``data``, ``train`` and ``eval``;
command-line flags override config values, and unknown keys are rejected.
"""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    DEFAULT_CLASSES,
    convert_released,
    gen_synth_dataset,
    load_dataset,
    load_stock_csv,
    sample_stock_windows,
    save_dataset,
    Instance,
    PairedDataset,
    tokenize_text,
)
from .evals import (
    DEFAULT_SAMPLES_PER_INSTANCE,
    DEFAULT_TOP_P_SWEEP,
    composition_eval,
    correctness,
    coverage_curve,
    metric_report,
    module_word_table,
    length_transfer_eval,
    plot_coverage,
)
from .trainer import (
    MODEL_KINDS,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
    train_baseline,
)

HOLDOUT_TRAIN_CLASSES = (
    ("increase", "begin"),
    ("decrease", "end"),
    ("increase", "middle"),
    ("decrease", "middle"),
)
HOLDOUT_TEST_CLASSES = (("increase", "end"), ("decrease", "begin"))

_CONFIG_SECTIONS = ("data", "train", "eval")


class UsageError(Exception):
    pass


def _load_config(path):
    if path is None:
        return {}
    obj = json.loads(Path(path).read_text())
    unknown = set(obj) - set(_CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config section '{sorted(unknown)[0]}'")
    return obj


def _resolve(section: dict, flag_values: dict, defaults: dict) -> dict:
    """defaults < config file < explicit flags."""
    unknown = set(section) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config key '{sorted(unknown)[0]}'")
    out = dict(defaults)
    out.update(section)
    out.update({k: v for k, v in flag_values.items() if v is not None})
    return out


def _refuse_overwrite(path, force):
    if path and Path(path).exists() and not force:
        raise UsageError(f"refusing to overwrite existing {path} (use --force)")


def _write_artifact(path, payload: dict, config: dict):
    payload = {"version": __version__, "config": config, **payload}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _parse_classes(spec_str):
    if spec_str in (None, "all", "6"):
        return DEFAULT_CLASSES
    if spec_str == "4":
        return HOLDOUT_TRAIN_CLASSES
    if spec_str == "2":
        return HOLDOUT_TEST_CLASSES
    classes = []
    for item in spec_str.split(","):
        trend, _, location = item.strip().partition("-")
        if not location:
            raise UsageError(f"bad class '{item}', expected trend-location")
        classes.append((trend, location))
    return tuple(classes)


def _check_vocab_match(result, dataset):
    texts = [cap for inst in dataset.instances for cap in inst.captions]
    if not texts:
        return
    known = set(result.vocab.itos)
    toks = [t for text in texts[:200] for t in tokenize_text(text)]
    if toks and sum(t not in known for t in toks) / len(toks) > 0.5:
        raise RuntimeError(
            "checkpoint vocabulary does not match this dataset "
            "(most caption tokens are out of vocabulary)"
        )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(args, config):
    sect = _resolve(
        config.get("data", {}),
        {"n": args.n, "t": args.t, "seed": args.seed, "captions_per": args.captions_per},
        {"n": 720, "t": 12, "seed": 0, "captions_per": 3, "classes": None},
    )
    classes = _parse_classes(args.classes if args.classes is not None else sect["classes"])
    _refuse_overwrite(args.out, args.force)
    dataset = gen_synth_dataset(
        sect["n"], sect["t"], classes=classes, seed=sect["seed"], captions_per=sect["captions_per"]
    )
    save_dataset(dataset, args.out)
    resolved = {**sect, "classes": ["-".join(c) for c in classes]}
    _write_artifact(
        str(args.out) + ".manifest.json",
        {"instances": len(dataset), "command": "synth-gen"},
        resolved,
    )
    hist = Counter(f"{inst.meta.trend}-{inst.meta.location}" for inst in dataset.instances)
    for cls in sorted(hist):
        print(f"{cls:24s} {hist[cls]}")
    print(f"wrote {len(dataset)} instances to {args.out}")
    return 0


def cmd_ingest(args, config):
    sect = _resolve(
        config.get("data", {}),
        {"count": args.count, "t": args.t, "seed": args.seed},
        {"count": 1900, "t": 12, "seed": 0, "classes": None, "n": None, "captions_per": None},
    )
    _refuse_overwrite(args.out, args.force)
    csv_files = sorted(Path(args.csv_dir).glob("*.csv"))
    if not csv_files:
        raise UsageError(f"no .csv files in {args.csv_dir}")
    series = [load_stock_csv(f) for f in csv_files]
    rng = np.random.default_rng(sect["seed"])
    windows, shortfall = sample_stock_windows(series, sect["t"], sect["count"], rng)
    instances = []
    for k, (values, provenance) in enumerate(windows):
        n = len(windows)
        split = "test" if k < n // 10 else "dev" if k < 2 * (n // 10) else "train"
        instances.append(
            Instance(id=f"stock-{k:05d}", series=values, captions=[], meta=None, split=split)
        )
    dataset = PairedDataset(instances)
    save_dataset(dataset, args.out)
    _write_artifact(
        str(args.out) + ".manifest.json",
        {"instances": len(dataset), "shortfall": shortfall, "command": "ingest"},
        sect,
    )
    if shortfall:
        print(f"warning: {shortfall} windows could not be placed without overlap")
    print(f"wrote {len(dataset)} instances to {args.out}")
    return 0


def cmd_convert(args, config):
    _refuse_overwrite(args.out, args.force)
    dataset = convert_released(args.released)
    save_dataset(dataset, args.out)
    n_caps = sum(len(inst.captions) for inst in dataset.instances)
    _write_artifact(
        str(args.out) + ".manifest.json",
        {"instances": len(dataset), "captions": n_caps, "command": "convert"},
        {"released": str(args.released)},
    )
    print(f"converted {len(dataset)} instances / {n_caps} captions to {args.out}")
    return 0


def cmd_train(args, config):
    flag_values = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "lr": args.lr,
        "lam": args.lam,
        "w_aux": args.w_aux,
        "seed": args.seed,
        "patience": args.patience,
        "lexicon": args.lexicon,
        "encoder_size": args.encoder_size,
    }
    defaults = TrainConfig().to_json()
    sect = _resolve(config.get("train", {}), flag_values, defaults)
    ablations = set(args.ablate or [])
    sect["direct_conditioning"] = args.model == "modular-d"
    sect["no_inference_net"] = "noinf" in ablations
    sect["no_heuristic"] = "noheur" in ablations
    train_config = TrainConfig.from_json(sect)
    _refuse_overwrite(args.out, args.force)
    dataset = load_dataset(args.data)
    if args.model in ("modular", "modular-d"):
        result = train(train_config, dataset)
    else:
        result = train_baseline(args.model, train_config, dataset)
    save_checkpoint(result, args.out)
    log_path = args.metrics_log or (str(args.out) + ".metrics.jsonl")
    with open(log_path, "w") as fh:
        for row in result.metrics:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    print(f"trained {args.model} for {len(result.metrics)} epochs "
          f"(best epoch {result.best_epoch}); checkpoint at {args.out}")
    if result.diverged:
        print("training diverged; checkpoint holds the last finite parameters")
        return 2
    return 0


def cmd_caption(args, config):
    sect = _resolve(
        config.get("eval", {}),
        {"top_p": args.top_p, "l": args.l, "seed": args.seed},
        {"top_p": 1.0, "l": DEFAULT_SAMPLES_PER_INSTANCE, "seed": 0,
         "top_p_sweep": None, "threads": None, "split": None},
    )
    _refuse_overwrite(args.out, args.force)
    result = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    _check_vocab_match(result, dataset)
    instances = dataset.split(args.split) if args.split != "all" else dataset.instances
    if not instances:
        raise UsageError(f"no instances in split '{args.split}'")
    series = np.stack([inst.series for inst in instances])
    records = []
    if args.mode == "greedy":
        if result.kind in ("modular", "modular-d"):
            from . import numerics as nx

            caps, z_sel, _ = result.model.greedy_captions(series)
            scores = result.model.space.scores(
                nx.constant(series.astype(result.store.dtype))
            ).data
            for row, (inst, cap, z) in enumerate(zip(instances, caps, z_sel)):
                i, j = result.model.space.z_pair(int(z))
                records.append({
                    "id": inst.id, "caption": cap.text, "program": int(z),
                    "pattern_module": i, "locate_module": j,
                    "truth_score": float(scores[row, int(z)]),
                })
        else:
            caps = result.model.greedy_captions(series)
            records = [{"id": inst.id, "caption": cap.text} for inst, cap in zip(instances, caps)]
    else:
        from .evals import _sample_captions

        sampled = _sample_captions(result, instances, sect["l"], sect["top_p"], sect["seed"])
        for inst, caps in zip(instances, sampled):
            records.append({"id": inst.id, "samples": caps})
    _write_artifact(args.out, {"command": "caption", "mode": args.mode,
                               "model_kind": result.kind, "captions": records}, sect)
    print(f"wrote {len(records)} caption records to {args.out}")
    return 0


def cmd_eval(args, config):
    sect = _resolve(
        config.get("eval", {}),
        {"seed": args.seed, "l": args.l, "threads": args.threads, "split": args.split},
        {"seed": 0, "l": DEFAULT_SAMPLES_PER_INSTANCE, "threads": 1,
         "top_p_sweep": list(DEFAULT_TOP_P_SWEEP), "top_p": None,
         "split": "test"},
    )
    _refuse_overwrite(args.out, args.force)
    result = load_checkpoint(args.ckpt)
    dataset = load_dataset(args.data)
    _check_vocab_match(result, dataset)
    split = sect["split"] or "test"
    if args.suite == "transfer" and args.split is None:
        split = "all"
    instances = dataset.instances if split == "all" else dataset.split(split)
    if not instances:
        raise UsageError(f"no instances in split '{split}'")
    payload = {"command": "eval", "suite": args.suite, "model_kind": result.kind,
               "split": split, "n_instances": len(instances)}

    if args.suite == "metrics":
        report = metric_report(result, instances, threads=sect["threads"])
        payload["report"] = report.to_json()
    elif args.suite == "correctness":
        rate, records = correctness(result, instances, threads=sect["threads"])
        payload["correctness"] = rate
        payload["records"] = records
    elif args.suite == "coverage":
        points = coverage_curve(result, instances, n_samples=sect["l"],
                                top_p_sweep=tuple(sect["top_p_sweep"]), seed=sect["seed"])
        curves = {result.kind: points}
        if args.compare_ckpt:
            other = load_checkpoint(args.compare_ckpt)
            curves[other.kind] = coverage_curve(other, instances, n_samples=sect["l"],
                                                top_p_sweep=tuple(sect["top_p_sweep"]),
                                                seed=sect["seed"])
        payload["curves"] = {
            name: [{"top_p": p.top_p, "correctness": p.correctness, "coverage": p.coverage}
                   for p in pts]
            for name, pts in curves.items()
        }
        if args.plot:
            plot_coverage(curves, args.plot)
            payload["plot"] = str(args.plot)
    elif args.suite == "transfer":
        rate, records = length_transfer_eval(result, instances, threads=sect["threads"])
        payload["correctness"] = rate
        payload["records"] = records
    elif args.suite == "composition":
        payload["accuracy"] = composition_eval(result, instances)
    elif args.suite == "analyze":
        payload["prior_table"] = module_word_table(result, instances, source="prior")
        if getattr(result.model, "inference", None) is not None:
            payload["inference_table"] = module_word_table(result, instances, source="inference")
    else:
        raise UsageError(f"unknown suite {args.suite}")
    _write_artifact(args.out, payload, sect)
    print(f"wrote {args.suite} report to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    parser = argparse.ArgumentParser(
        prog="tscap",
        description="Truth-conditional program captioning for short time series",
    )
    parser.add_argument("--version", action="version", version=f"tscap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--classes", help="all | 4 | 2 | comma list of trend-location")
    p.add_argument("--seed", type=int)
    p.add_argument("--captions-per", type=int, dest="captions_per")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("ingest", help="sample normalized windows from price CSVs")
    p.add_argument("--csv-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--t", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("convert", help="convert a released corpus file to canonical format")
    p.add_argument("--released", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("train", help="train the program model or a baseline")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", choices=MODEL_KINDS, default="modular")
    p.add_argument("--ablate", action="append", choices=["noinf", "noheur"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--lam", type=float, help="prior temperature")
    p.add_argument("--w-aux", type=float, dest="w_aux")
    p.add_argument("--seed", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--lexicon", choices=["synth", "stock"])
    p.add_argument("--encoder-size", type=int, dest="encoder_size")
    p.add_argument("--metrics-log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", help="generate captions from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all", choices=["train", "dev", "test", "all"])
    p.add_argument("--mode", choices=["greedy", "sample"], default="greedy")
    p.add_argument("--top-p", type=float, dest="top_p")
    p.add_argument("--l", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval", help="run an evaluation suite")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--suite", required=True,
                   choices=["metrics", "correctness", "coverage", "transfer",
                            "composition", "analyze"])
    p.add_argument("--split", choices=["train", "dev", "test", "all"])
    p.add_argument("--plot")
    p.add_argument("--compare-ckpt", dest="compare_ckpt")
    p.add_argument("--l", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.set_defaults(func=cmd_eval)

    for sp in sub.choices.values():
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--force", action="store_true", help="overwrite existing outputs")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses exit code 2 for usage problems; this tool reserves 1
        return 0 if exc.code == 0 else 1
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
