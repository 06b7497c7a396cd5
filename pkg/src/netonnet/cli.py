"""Command-line entry points: prepare, train, evaluate, search, analyze, report."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import yaml

from . import analysis
from .config import ConfigError, NONConfig, config_hash, parse_operations
from .data import (DataError, DatasetSchema, EncodedTable, Vocabulary, build_vocabulary,
                   compute_normalization, encode_dataset, read_rows, split_indices)
from .model import CheckpointError, NONModel, load_checkpoint, save_checkpoint
from .search import SearchError, SearchSpace, read_records, run_search
from .training import TrainingError, evaluate, fit

logger = logging.getLogger("netonnet")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

TRAINING_KEYS = ("learning_rate", "batch_size", "epochs", "patience", "alpha", "alpha_decay", "gamma")
MODEL_KEYS = tuple(f.name for f in fields(NONConfig) if f.name not in TRAINING_KEYS)
DATA_KEYS = ("train", "test", "schema", "threshold", "valid_fraction", "test_fraction", "seed")
SEARCH_KEYS = ("n_trials", "workers", "space")
SPLITS = ("train", "valid", "test")


class UsageError(Exception):
    """Bad flags, bad config, or a missing prerequisite; exits with status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ------------------------------------------------------------------ config

@dataclass
class RunConfig:
    path: Path | None
    data: dict
    model: NONConfig
    search: dict
    raw: dict

    @property
    def hash(self) -> str:
        return config_hash(self.raw)

    def resolve(self, p) -> Path:
        p = Path(p)
        base = self.path.parent if self.path is not None else Path.cwd()
        return p if p.is_absolute() else base / p

    def schema(self) -> DatasetSchema:
        s = self.data.get("schema")
        if s is None:
            raise UsageError("config data.schema is required")
        return DatasetSchema.from_dict(s) if isinstance(s, dict) else DatasetSchema.load(self.resolve(s))


def _section(raw, name, allowed):
    sec = raw.get(name) or {}
    if not isinstance(sec, dict):
        raise UsageError(f"config section {name!r} must be a mapping")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise UsageError(f"unknown keys in {name!r}: {sorted(unknown)}")
    return sec


def load_run_config(path) -> RunConfig:
    if path is None:
        raw = {}
    else:
        path = Path(path)
        if not path.exists():
            raise UsageError(f"config file {path} does not exist")
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
    if not isinstance(raw, dict):
        raise UsageError("config must be a mapping with data/model/training/search sections")
    unknown = set(raw) - {"data", "model", "training", "search"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    data = _section(raw, "data", DATA_KEYS)
    model = _section(raw, "model", MODEL_KEYS)
    training = _section(raw, "training", TRAINING_KEYS)
    search = _section(raw, "search", SEARCH_KEYS)
    try:
        cfg = NONConfig.from_dict({**model, **training})
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid model/training config: {exc}") from None
    return RunConfig(path, data, cfg, search, raw)


def subsystem_seeds(seed: int) -> dict[str, int]:
    """Independent seeds for split, init, shuffle and search, derived from one global seed."""
    children = np.random.SeedSequence(seed).spawn(4)
    return {k: int(c.generate_state(1)[0]) for k, c in zip(("split", "init", "shuffle", "search"), children)}


# ------------------------------------------------------------------ artifacts

class Artifacts:
    def __init__(self, out: Path):
        self.out = out

    manifest = property(lambda self: self.out / "manifest.json")
    vocab = property(lambda self: self.out / "vocab.json")
    stats = property(lambda self: self.out / "normalization.json")
    model = property(lambda self: self.out / "model.npz")
    train_log = property(lambda self: self.out / "train_log.jsonl")
    trials = property(lambda self: self.out / "trials.jsonl")
    best_model = property(lambda self: self.out / "best_model.npz")
    similarity = property(lambda self: self.out / "similarity.json")
    embeddings = property(lambda self: self.out / "embeddings.tsv")

    def split(self, name):
        return self.out / f"{name}.npz"

    def require(self, path: Path, command: str) -> Path:
        if not path.exists():
            raise UsageError(f"{path} not found; run `netonnet {command}` first")
        return path


def _emit(args, human: str, record: dict) -> None:
    print(json.dumps(record, sort_keys=True) if args.json_lines else human, flush=True)


def _load_prepared(run: RunConfig, art: Artifacts):
    manifest = json.loads(art.require(art.manifest, "prepare").read_text())
    schema = run.schema()
    if manifest["schema_hash"] != schema.hash():
        raise UsageError("the configured schema differs from the prepared data; run `netonnet prepare` again")
    vocab = Vocabulary.load(art.require(art.vocab, "prepare"))
    tables = {s: EncodedTable.load(art.require(art.split(s), "prepare")) for s in SPLITS}
    return manifest, schema, vocab, tables


# ------------------------------------------------------------------ commands

def cmd_prepare(args, run: RunConfig, art: Artifacts, seeds) -> int:
    schema = run.schema()
    if "train" not in run.data:
        raise UsageError("config data.train is required for prepare")
    threshold = int(run.data.get("threshold", 5))
    valid_fraction = float(run.data.get("valid_fraction", 0.2))
    rows = read_rows(run.resolve(run.data["train"]), schema)
    if run.data.get("test"):
        test_rows = read_rows(run.resolve(run.data["test"]), schema)
    else:
        keep, held = split_indices(len(rows), float(run.data.get("test_fraction", 0.2)), seeds["split"] + 1)
        test_rows = [rows[i] for i in held]
        rows = [rows[i] for i in keep]
    keep, held = split_indices(len(rows), valid_fraction, seeds["split"])
    train_rows, valid_rows = [rows[i] for i in keep], [rows[i] for i in held]
    # vocabulary and statistics come from the training split only
    vocab = build_vocabulary(train_rows, schema, threshold)
    stats = compute_normalization(train_rows, schema)
    art.out.mkdir(parents=True, exist_ok=True)
    vocab.save(art.vocab)
    stats.save(art.stats)
    counts = {}
    for name, part in (("train", train_rows), ("valid", valid_rows), ("test", test_rows)):
        table = encode_dataset(part, schema, vocab, stats)
        table.save(art.split(name))
        counts[name] = len(table)
    manifest = {"config_hash": run.hash, "schema_hash": schema.hash(), "seed": args.seed,
                "threshold": threshold, "rows": counts, "vocab_sizes": vocab.sizes()}
    art.manifest.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    _emit(args, f"prepared {counts['train']} train / {counts['valid']} valid / {counts['test']} test rows "
                f"into {art.out}", {"command": "prepare", **manifest})
    return EXIT_OK


def cmd_train(args, run: RunConfig, art: Artifacts, seeds) -> int:
    manifest, schema, vocab, tables = _load_prepared(run, art)
    model = NONModel(run.model, schema, vocab.sizes(), seed=seeds["init"])
    log = open(art.train_log, "w", encoding="utf-8")

    def on_epoch(rec):
        log.write(json.dumps({**rec, "config_hash": run.hash}, sort_keys=True) + "\n")
        log.flush()
        _emit(args, f"epoch {rec['epoch']}: train loss {rec['train_loss']:.4f}, valid AUC {rec['valid_auc']:.4f}",
              {"command": "train", **rec})

    try:
        report = fit(model, tables["train"], tables["valid"], seed=seeds["shuffle"], on_epoch=on_epoch)
    finally:
        log.close()
    save_checkpoint(art.model, model, trained=True, vocab_ref=str(art.vocab),
                    extra={"run_config_hash": run.hash, "best_epoch": report.best_epoch,
                           "best_valid_auc": report.best_valid_auc})
    _emit(args, f"best epoch {report.best_epoch}, valid AUC {report.best_valid_auc:.4f}; saved {art.model}",
          {"command": "train", "checkpoint": str(art.model), "config_hash": run.hash, **report.metrics()})
    return EXIT_OK


def _checkpoint_path(args, art: Artifacts) -> Path:
    if args.checkpoint:
        path = Path(args.checkpoint)
        if not path.exists():
            raise UsageError(f"checkpoint {path} not found; run `netonnet train` or `netonnet search` first")
        return path
    for candidate in (art.model, art.best_model):
        if candidate.exists():
            return candidate
    raise UsageError(f"no checkpoint in {art.out}; run `netonnet train` first")


def cmd_evaluate(args, run: RunConfig, art: Artifacts, seeds) -> int:
    _, schema, _, tables = _load_prepared(run, art)
    path = _checkpoint_path(args, art)
    model, meta = load_checkpoint(path, schema)
    score, loss = evaluate(model, tables[args.split])
    _emit(args, f"{args.split} AUC: {score:.4f}",
          {"command": "evaluate", "split": args.split, "auc": score, "loss": loss, "checkpoint": str(path),
           "config_hash": meta["config_hash"]})
    return EXIT_OK


def cmd_search(args, run: RunConfig, art: Artifacts, seeds) -> int:
    _, schema, vocab, tables = _load_prepared(run, art)
    space_cfg = dict(run.search.get("space") or {})
    if args.fix_operations:
        space_cfg["fixed_operations"] = parse_operations(args.fix_operations)
    try:
        space = SearchSpace.from_dict(space_cfg, base=run.model)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid search space: {exc}") from None
    n_trials = args.trials or int(run.search.get("n_trials", 60))
    workers = args.workers or int(run.search.get("workers", 1))
    art.trials.unlink(missing_ok=True)

    def on_trial(rec):
        if rec.status == "ok":
            human = f"trial {rec.trial_id}: valid AUC {rec.valid_auc:.4f}, test AUC {rec.test_auc:.4f}"
        else:
            human = f"trial {rec.trial_id}: failed ({rec.error})"
        _emit(args, human, {"command": "search", **rec.to_dict()})

    result = run_search(space, schema, vocab.sizes(), tables["train"], tables["valid"], tables["test"],
                        n_trials=n_trials, seed=seeds["search"], workers=workers, sink=art.trials,
                        meta={"config_hash": run.hash}, on_trial=on_trial)
    best = NONModel(NONConfig.from_dict(result.best.config), schema, vocab.sizes())
    best.load_state_dict(result.best_state)
    save_checkpoint(art.best_model, best, trained=True, vocab_ref=str(art.vocab),
                    extra={"run_config_hash": run.hash, "trial_id": result.best.trial_id})
    summary = {**result.summary(), "config_hash": run.hash}
    _emit(args, f"best trial {result.best.trial_id}: valid AUC {result.best.valid_auc:.4f}, "
                f"test AUC {result.best.test_auc:.4f}; saved {art.best_model}", {"command": "search", **summary})
    return EXIT_OK


def cmd_analyze(args, run: RunConfig, art: Artifacts, seeds) -> int:
    _, schema, vocab, _ = _load_prepared(run, art)
    path = _checkpoint_path(args, art)
    model, meta = load_checkpoint(path, schema)
    if not meta.get("trained") and not args.allow_untrained:
        raise UsageError(f"{path} holds an untrained model; train first or pass --allow-untrained")
    names = args.fields.split(",") if args.fields else schema.categorical
    report = analysis.field_similarity(model, sample_size=args.sample_size, seed=seeds["search"], fields=names)
    out = {**report.to_dict(), "checkpoint": str(path), "config_hash": meta["config_hash"]}
    art.similarity.write_text(json.dumps(out, indent=2, sort_keys=True))
    n = analysis.export_embeddings(model, [f for f in names if f in report.before], art.embeddings, vocab,
                                   sample_size=args.sample_size, seed=seeds["search"])
    lines = [f"{'field':<20} {'before':>12} {'after':>12}"]
    lines += [f"{k:<20} {report.before[k]:>12.6f} {report.after[k]:>12.6f}" for k in report.before]
    lines.append(f"{'micro average':<20} {report.micro_before:>12.6f} {report.micro_after:>12.6f}")
    lines.append(f"wrote {art.similarity} and {n} embedding rows to {art.embeddings}")
    _emit(args, "\n".join(lines), {"command": "analyze", **out, "embedding_rows": n})
    return EXIT_OK


def cmd_report(args, run: RunConfig, art: Artifacts, seeds) -> int:
    records, summary = read_records(art.require(art.trials, "search"))
    if args.json_lines:
        for r in records:
            print(json.dumps(r.to_dict(), sort_keys=True))
        if summary is not None:
            print(json.dumps(summary, sort_keys=True))
        return EXIT_OK
    best_id = summary["best_trial"] if summary else None
    print(f"{'trial':>5} {'valid AUC':>9} {'test AUC':>9} {'epochs':>6} {'sec':>7}  operations / lr / d / dnn")
    for r in records:
        mark = "*" if r.trial_id == best_id else " "
        c = r.config
        if r.status == "ok":
            print(f"{r.trial_id:>4}{mark} {r.valid_auc:>9.4f} {r.test_auc:>9.4f} {r.epochs_run:>6} {r.seconds:>7.1f}  "
                  f"{','.join(c['operations'])} / {c['learning_rate']:.3g} / {c['embedding_dim']} / "
                  f"{'x'.join(str(w) for w in c['dnn_widths'])}")
        else:
            print(f"{r.trial_id:>4}{mark} failed: {r.error}")
    if summary is not None:
        print(f"{summary['n_trials']} trials, {summary['n_failed']} failed; best trial {summary['best_trial']} "
              f"(valid {summary['best_valid_auc']:.4f}, test {summary['best_test_auc']:.4f})")
    else:
        print("search did not finish: no summary record")
    return EXIT_OK


COMMANDS = {"prepare": cmd_prepare, "train": cmd_train, "evaluate": cmd_evaluate, "search": cmd_search,
            "analyze": cmd_analyze, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML run config with data/model/training/search sections")
    common.add_argument("--seed", type=int, default=None, help="global seed (default: data.seed or 0)")
    common.add_argument("--out", default=None, help="artifact directory (default: ./netonnet-out)")
    common.add_argument("--json-lines", action="store_true", help="machine-readable output, one JSON object per line")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = _Parser(prog="netonnet", description="Network-on-network models for tabular click prediction.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="build vocabulary, statistics and encoded splits")
    sub.add_parser("train", parents=[common], help="train one model from the config")
    p = sub.add_parser("evaluate", parents=[common], help="AUC of a checkpoint on a split")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--checkpoint")
    p = sub.add_parser("search", parents=[common], help="random hyperparameter search")
    p.add_argument("--fix-operations", help="comma list, e.g. lr,dnn")
    p.add_argument("--trials", type=int)
    p.add_argument("--workers", type=int)
    p = sub.add_parser("analyze", parents=[common], help="field similarity and embedding export")
    p.add_argument("--checkpoint")
    p.add_argument("--allow-untrained", action="store_true")
    p.add_argument("--sample-size", type=int, default=200)
    p.add_argument("--fields", help="comma list of categorical fields (default: all)")
    sub.add_parser("report", parents=[common], help="summarise search trial records")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = load_run_config(args.config)
        if args.seed is None:
            args.seed = int(run.data.get("seed", 0))
        out = Path(args.out) if args.out else Path("netonnet-out")
        return COMMANDS[args.command](args, run, Artifacts(out), subsystem_seeds(args.seed))
    except (UsageError, ConfigError, DataError, yaml.YAMLError) as exc:
        print(f"netonnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, SearchError, CheckpointError, analysis.UndefinedMetricError, OSError,
            FloatingPointError) as exc:
        print(f"netonnet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
