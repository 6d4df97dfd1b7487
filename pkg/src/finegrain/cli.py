"""Command line entry point: ``finegrain <subcommand> ...``.

Every subcommand writes ``resolved_config.json`` next to its outputs. Exit
status is 0 on success, 1 on bad input or usage and 2 on runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .exceptions import (ArtifactMismatchError, ConfigurationError, ContractError, FineGrainError,
                         UndefinedMetricError)
from .structuralizer import (DISEASES, DensityReport, FieldSchema, RuleTable, Structuralizer,
                             density_report, prune_schema, read_corpus)

log = logging.getLogger("finegrain")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 1, 2
RESOLVED = "resolved_config.json"

# Estimator parameters settable from --config or flags in ``train``.
TRAIN_KEYS = ("channels", "length", "n_blocks", "reduction", "dropout", "hidden", "infusion", "fusion",
              "modality", "tokenizer", "min_count", "batch_size", "max_epochs", "lr", "patience",
              "target_map", "word2vec_epochs", "scale_structured", "threshold", "density_threshold")
VARIANTS = {
    "full": {},
    "baseline": {"infusion": False, "fusion": False},
    "text": {"modality": "text"},
    "struct": {"modality": "struct"},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise ContractError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: config must be a JSON object")
    return doc


def _resolve(args, defaults: dict, flags: dict) -> dict:
    """Defaults, then --config, then explicitly given flags."""
    cfg = dict(defaults)
    from_file = _load_config(args.config)
    unknown = sorted(set(from_file) - set(defaults))
    if unknown:
        raise ConfigurationError(f"unknown config keys for {args.command}: {unknown}")
    cfg.update(from_file)
    cfg.update({k: v for k, v in flags.items() if v is not None})
    return cfg


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required")
    return value


def _corpus(path) -> list:
    p = Path(_need(path, "--in"))
    if p.is_dir():
        p = p / "corpus.jsonl"
    if not p.exists():
        raise ContractError(f"{p}: no such corpus file")
    return read_corpus(p)


def _split(corpus_dir: Path, name: str) -> list:
    path = corpus_dir / f"{name}.jsonl"
    if not path.exists():
        raise ContractError(f"{path}: split file not found")
    return read_corpus(path)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> None:
    from .synth import GeneratorConfig, generate

    sizes = None
    if args.split_sizes:
        try:
            sizes = [int(v) for v in args.split_sizes.split(",")]
        except ValueError:
            raise UsageError("--split-sizes takes three comma-separated integers") from None
    defaults = GeneratorConfig().to_dict()
    cfg = _resolve(args, defaults, {"seed": args.seed, "preset": args.preset, "n_notes": args.n_notes,
                                    "split_sizes": sizes})
    gen = GeneratorConfig.from_dict(cfg)
    out = Path(_need(args.out, "--out"))
    corpus = generate(gen)
    corpus.save(out)
    _write(out / RESOLVED, _dump({"command": "synth", **gen.to_dict()}))
    log.info("wrote %d notes to %s", len(corpus.notes), out)


def cmd_stats(args) -> None:
    from .synth import corpus_stats, stats_tables

    notes = _corpus(args.inp)
    out = Path(_need(args.out, "--out"))
    stats = corpus_stats(notes)
    _write(out / "stats.json", _dump(stats))
    for panel, table in stats_tables(stats).items():
        _write(out / f"{panel}.tsv", table)
    _write(out / RESOLVED, _dump({"command": "stats", "in": str(args.inp)}))


def cmd_structuralize(args) -> None:
    notes = _corpus(args.inp)
    out = Path(_need(args.out, "--out"))
    cfg = _resolve(args, {"schema": None, "rules": None}, {"schema": args.schema, "rules": args.rules})
    rules = RuleTable.load(cfg["rules"])
    schema = FieldSchema.load(cfg["schema"])
    records = Structuralizer(rules, schema, prune=False).extract_all(notes)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "records.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True, ensure_ascii=False) + "\n")
    report = density_report(records, schema)
    _write(out / "density.json", _dump(report.to_dict()))
    schema.save(out / "schema.json")
    _write(out / RESOLVED, _dump({"command": "structuralize", "in": str(args.inp), **cfg}))
    log.info("structuralized %d notes over %d fields", len(records), len(schema))


def cmd_prune(args) -> None:
    src = Path(_need(args.inp, "--in"))
    out = Path(args.out) if args.out else src
    cfg = _resolve(args, {"threshold": 0.075}, {"threshold": args.threshold})
    try:
        report = DensityReport.from_dict(json.loads((src / "density.json").read_text("utf-8")))
        schema = FieldSchema.load(args.schema or src / "schema.json")
    except FileNotFoundError as exc:
        raise ContractError(f"{exc.filename}: not found; run structuralize first") from None
    kept = prune_schema(report, schema, cfg["threshold"])
    out.mkdir(parents=True, exist_ok=True)
    kept.save(out / "pruned_schema.json")
    dens = report.densities
    lines = ["field\tdensity\tkept"]
    lines += [f"{f.name}\t{dens[f.name]!r}\t{int(f.name in kept.names)}" for f in schema]
    _write(out / "prune_report.tsv", "\n".join(lines) + "\n")
    _write(out / (RESOLVED if out != src else "prune.resolved_config.json"),
           _dump({"command": "prune", "in": str(src), **cfg}))
    log.info("kept %d of %d fields", len(kept), len(schema))


def _train_params(args) -> dict:
    from .estimator import FineGrainClassifier

    defaults = {k: v for k, v in FineGrainClassifier().get_params().items() if k in TRAIN_KEYS}
    defaults.update({"variant": "full", "seed": 0})
    flags = {"seed": args.seed, "variant": args.variant, "max_epochs": args.epochs, "lr": args.lr,
             "channels": args.channels, "length": args.length, "n_blocks": args.n_blocks,
             "batch_size": args.batch_size, "threshold": args.threshold}
    cfg = _resolve(args, defaults, flags)
    if cfg["variant"] not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {sorted(VARIANTS)}")
    return cfg


def cmd_train(args) -> None:
    from .estimator import FineGrainClassifier

    corpus_dir = Path(_need(args.inp, "--in/--corpus"))
    out = Path(_need(args.out or args.checkpoint, "--out"))
    cfg = _train_params(args)
    params = {k: cfg[k] for k in TRAIN_KEYS}
    params.update(VARIANTS[cfg["variant"]])
    params.update(schema=args.schema, rules=args.rules, random_state=cfg["seed"])
    train_notes = _split(corpus_dir, "train")
    val_path = corpus_dir / "val.jsonl"
    val_notes = read_corpus(val_path) if val_path.exists() else None
    est = FineGrainClassifier(**params).fit(train_notes, X_val=val_notes)
    est.save(out)
    _write(out / RESOLVED, _dump({"command": "train", "in": str(corpus_dir), "schema": args.schema,
                                  "rules": args.rules, **cfg}))
    log.info("best epoch %d, selection mAP %.4f", est.history_.best_epoch, est.history_.best_val_map)


def cmd_evaluate(args) -> None:
    from .estimator import FineGrainClassifier
    from .metrics import bootstrap_ci, summarize, write_scores
    from .validation import labels_for

    est = FineGrainClassifier.load(_need(args.checkpoint, "--checkpoint"))
    src = Path(_need(args.inp, "--in"))
    notes = read_corpus(src / "test.jsonl" if src.is_dir() else src)
    out = Path(_need(args.out, "--out"))
    cfg = _resolve(args, {"threshold": est.threshold, "n_resamples": 0, "seed": 0, "level": 0.95},
                   {"threshold": args.threshold, "n_resamples": args.n_resamples, "seed": args.seed})
    scores = est.predict_proba(notes)
    labels = labels_for(notes)
    report = summarize(scores, labels, threshold=cfg["threshold"])
    if cfg["n_resamples"] > 0:
        for metric in ("mAP", "macro_f1"):
            report.intervals[metric] = bootstrap_ci(scores, labels, metric, cfg["n_resamples"],
                                                    cfg["level"], cfg["seed"])
    out.mkdir(parents=True, exist_ok=True)
    write_scores(out / "scores.txt", scores, labels)
    _write(out / "metrics.json", report.to_json() + "\n")
    _write(out / "metrics.txt", report.to_table() + "\n")
    _write(out / RESOLVED, _dump({"command": "evaluate", "in": str(src), "checkpoint": str(args.checkpoint),
                                  **cfg}))
    print(report.to_table())


def cmd_compare(args) -> None:
    from .metrics import metric_permutation_test, read_scores

    paths = _need(args.inp, "--in")
    if len(paths) != 2:
        raise UsageError("compare takes exactly two score files: --in A B")
    cfg = _resolve(args, {"metric": "mAP", "n_resamples": 2000, "seed": 0},
                   {"n_resamples": args.n_resamples, "seed": args.seed, "metric": args.metric})
    (sa, ya), (sb, yb) = (read_scores(p) for p in paths)
    if not np.array_equal(ya, yb):
        raise ContractError("the two score files carry different labels; they must score the same notes")
    diff, p = metric_permutation_test([sa], [sb], [ya], cfg["metric"], cfg["n_resamples"], cfg["seed"])
    result = {"a": str(paths[0]), "b": str(paths[1]), "metric": cfg["metric"],
              "difference": diff, "p_value": p, "n_notes": int(len(ya))}
    text = _dump(result)
    if args.out:
        out = Path(args.out)
        _write(out / "comparison.json", text)
        _write(out / RESOLVED, _dump({"command": "compare", "in": [str(p) for p in paths], **cfg}))
    print(text, end="")


def cmd_explain(args) -> None:
    from .estimator import FineGrainClassifier
    from .interpret import render, saliency
    from .validation import check_target_class

    est = FineGrainClassifier.load(_need(args.checkpoint, "--checkpoint"))
    src = Path(_need(args.inp, "--in"))
    notes = read_corpus(src / "test.jsonl" if src.is_dir() else src)
    out = Path(_need(args.out, "--out"))
    cfg = _resolve(args, {"class": "pneumonia", "reduction": "sum", "ids": None, "limit": 10},
                   {"class": args.target, "reduction": args.reduction,
                    "ids": args.ids.split(",") if args.ids else None, "limit": args.limit})
    c = check_target_class(cfg["class"])
    if cfg["ids"]:
        by_id = {n.id: n for n in notes}
        missing = [i for i in cfg["ids"] if i not in by_id]
        if missing:
            raise ContractError(f"note ids not in {src}: {missing}")
        chosen = [by_id[i] for i in cfg["ids"]]
    else:
        chosen = notes[:cfg["limit"]]
    for note in chosen:
        render(saliency(note, est, c, cfg["reduction"]), out)
    _write(out / RESOLVED, _dump({"command": "explain", "in": str(src), "checkpoint": str(args.checkpoint),
                                  **cfg, "class": DISEASES[c]}))
    log.info("wrote saliency for %d notes", len(chosen))


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--config", help="JSON file of parameter overrides")
    common.add_argument("--out")

    parser = _Parser(prog="finegrain", description="Hybrid text and structured-data note classification.")
    parser.add_argument("--version", action="version", version=f"finegrain {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--preset", choices=("text", "struct", "mixed"))
    p.add_argument("--n-notes", type=int)
    p.add_argument("--split-sizes", help="train,val,test counts")

    p = sub.add_parser("stats", parents=[common], help="corpus distributions")
    p.add_argument("--in", dest="inp")

    p = sub.add_parser("structuralize", parents=[common], help="extract structured records")
    p.add_argument("--in", dest="inp")
    p.add_argument("--schema")
    p.add_argument("--rules")

    p = sub.add_parser("prune", parents=[common], help="density pruning of a structuralized corpus")
    p.add_argument("--in", dest="inp", help="output directory of structuralize")
    p.add_argument("--schema")
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("train", parents=[common], help="fit a classifier on a corpus directory")
    p.add_argument("--in", "--corpus", dest="inp", help="directory with train.jsonl and val.jsonl")
    p.add_argument("--checkpoint", help="model directory (alias of --out)")
    p.add_argument("--schema")
    p.add_argument("--rules")
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--channels", type=int)
    p.add_argument("--length", type=int)
    p.add_argument("--n-blocks", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("evaluate", parents=[common], help="score a corpus and report metrics")
    p.add_argument("--in", dest="inp", help="corpus file, or a directory holding test.jsonl")
    p.add_argument("--checkpoint")
    p.add_argument("--threshold", type=float)
    p.add_argument("--n-resamples", type=int, help="bootstrap resamples (0 disables)")

    p = sub.add_parser("compare", parents=[common], help="paired permutation test of two score files")
    p.add_argument("--in", dest="inp", nargs="+")
    p.add_argument("--n-resamples", type=int)
    p.add_argument("--metric", choices=("mAP", "macro_f1"))

    p = sub.add_parser("explain", parents=[common], help="token saliency for notes")
    p.add_argument("--in", dest="inp")
    p.add_argument("--checkpoint")
    p.add_argument("--class", dest="target")
    p.add_argument("--reduction", choices=("sum", "l2"))
    p.add_argument("--ids", help="comma-separated note ids")
    p.add_argument("--limit", type=int)
    return parser


COMMANDS = {
    "synth": cmd_synth, "stats": cmd_stats, "structuralize": cmd_structuralize, "prune": cmd_prune,
    "train": cmd_train, "evaluate": cmd_evaluate, "compare": cmd_compare, "explain": cmd_explain,
}


def _setup_logging() -> None:
    level = os.environ.get("FINEGRAIN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        level = "error"
    root = logging.getLogger("finegrain")
    root.handlers[:] = []
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(levels[level])
    root.propagate = False


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(parser.format_usage(), end="", file=sys.stderr)
        return EXIT_INPUT
    except (ContractError, ConfigurationError, ArtifactMismatchError, UndefinedMetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (FineGrainError, OSError, RuntimeError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
