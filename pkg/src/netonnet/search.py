"""Random hyperparameter search with reproducible, independent trials."""
from __future__ import annotations

import collections
import itertools
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .config import (FIELD_WISE_MULTIPLIERS, OPTIONAL_OPERATIONS, FieldGroup, FieldWiseConfig, NONConfig,
                     parse_operations)
from .data import DatasetSchema, EncodedTable
from .model import NONModel
from .training import evaluate, fit

logger = logging.getLogger(__name__)


class SearchError(RuntimeError):
    pass


def operation_combinations() -> list[tuple[str, ...]]:
    """The 7 nonempty subsets of the optional operations, each with the mandatory dnn."""
    combos = []
    for r in range(1, len(OPTIONAL_OPERATIONS) + 1):
        for subset in itertools.combinations(OPTIONAL_OPERATIONS, r):
            combos.append(parse_operations(("dnn",) + subset))
    return combos


@dataclass(frozen=True)
class SearchSpace:
    learning_rate: tuple[float, float] = (0.05, 0.5)
    embedding_dims: tuple[int, ...] = (8, 16, 32, 64, 128)
    dnn_widths: tuple[int, ...] = (64, 128, 256, 512, 1024, 2048)
    dnn_depth: tuple[int, int] = (1, 4)
    field_wise_multipliers: tuple[float, ...] = FIELD_WISE_MULTIPLIERS
    field_wise_depth: tuple[int, int] = (1, 4)
    alpha: tuple[float, float] = (0.1, 1.0)
    gamma: tuple[float, float] = (1e-5, 1e-4)
    operations: tuple[tuple[str, ...], ...] = field(default_factory=lambda: tuple(operation_combinations()))
    fixed_operations: tuple[str, ...] | None = None
    disable_field_wise: bool = False
    base: NONConfig = field(default_factory=NONConfig)   # everything not searched

    def __post_init__(self):
        if self.fixed_operations is not None:
            object.__setattr__(self, "fixed_operations", parse_operations(self.fixed_operations))
        object.__setattr__(self, "operations", tuple(parse_operations(o) for o in self.operations))
        self.validate()

    def validate(self) -> None:
        lo, hi = self.learning_rate
        if not 0 < lo <= hi:
            raise ValueError(f"learning rate range {self.learning_rate} must satisfy 0 < lo <= hi")
        for name in ("alpha", "gamma"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} range must satisfy 0 <= lo <= hi")
        for name in ("dnn_depth", "field_wise_depth"):
            lo, hi = getattr(self, name)
            if not 1 <= lo <= hi:
                raise ValueError(f"{name} must satisfy 1 <= lo <= hi")
        if not self.embedding_dims or not self.dnn_widths or not self.field_wise_multipliers:
            raise ValueError("discrete choice sets must be nonempty")
        bad = [m for m in self.field_wise_multipliers if m not in FIELD_WISE_MULTIPLIERS]
        if bad:
            raise ValueError(f"field-wise multipliers {bad} not in {FIELD_WISE_MULTIPLIERS}")
        combos = [self.fixed_operations] if self.fixed_operations is not None else self.operations
        if not combos or any("dnn" not in c for c in combos):
            raise ValueError("every operation combination must include dnn")

    @classmethod
    def from_dict(cls, d: dict, base: NONConfig | None = None) -> SearchSpace:
        known = {f for f in cls.__dataclass_fields__ if f != "base"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown search space keys: {sorted(unknown)}")
        kw = {}
        for k, v in d.items():
            if k == "operations":
                kw[k] = tuple(parse_operations(o) for o in v)
            elif k == "fixed_operations":
                kw[k] = None if v is None else parse_operations(v)
            elif k == "disable_field_wise":
                kw[k] = bool(v)
            else:
                kw[k] = tuple(v)
        if base is not None:
            kw["base"] = base
        return cls(**kw)


def _uniform_int(rng, bounds):
    return int(rng.integers(bounds[0], bounds[1] + 1))


def sample_config(space: SearchSpace, rng: np.random.Generator) -> NONConfig:
    """Draw one configuration; the learning rate is log-uniform, other ranges uniform."""
    lo, hi = space.learning_rate
    lr = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    d = int(rng.choice(space.embedding_dims))
    depth = _uniform_int(rng, space.dnn_depth)
    widths = tuple(int(rng.choice(space.dnn_widths)) for _ in range(depth))
    fw_depth = _uniform_int(rng, space.field_wise_depth)
    mults = tuple(float(rng.choice(space.field_wise_multipliers)) for _ in range(fw_depth - 1))
    alpha = float(rng.uniform(*space.alpha))
    gamma = float(rng.uniform(*space.gamma))
    if space.fixed_operations is not None:
        ops = space.fixed_operations
    else:
        ops = space.operations[int(rng.integers(len(space.operations)))]
    if space.disable_field_wise:
        fw = FieldWiseConfig.disabled()
    else:
        fw = FieldWiseConfig((FieldGroup(fw_depth, mults),), space.base.field_wise.refinement)
    return replace(space.base, learning_rate=lr, embedding_dim=d, dnn_widths=widths, field_wise=fw,
                   alpha=alpha, gamma=gamma, operations=ops)


@dataclass
class TrialRecord:
    trial_id: int
    seed: int
    config: dict
    valid_auc: float = float("nan")
    test_auc: float = float("nan")
    epochs_run: int = 0
    best_epoch: int = -1
    seconds: float = 0.0
    status: str = "ok"
    error: str | None = None

    def to_dict(self) -> dict:
        return {"trial_id": self.trial_id, "seed": self.seed, "config": self.config,
                "valid_auc": self.valid_auc, "test_auc": self.test_auc, "epochs_run": self.epochs_run,
                "best_epoch": self.best_epoch, "seconds": self.seconds, "status": self.status,
                "error": self.error}

    def content(self) -> dict:
        """Everything except wall-clock time; equal across reruns with the same seed."""
        out = self.to_dict()
        del out["seconds"]
        return out

    @classmethod
    def from_dict(cls, d: dict) -> TrialRecord:
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class SearchResult:
    records: list[TrialRecord]
    best: TrialRecord
    best_state: dict | None = field(default=None, repr=False)

    def summary(self) -> dict:
        failed = [r for r in self.records if r.status != "ok"]
        return {"summary": True, "n_trials": len(self.records), "n_failed": len(failed),
                "best_trial": self.best.trial_id, "best_valid_auc": self.best.valid_auc,
                "best_test_auc": self.best.test_auc}


def trial_seeds(seed: int, trial_id: int) -> tuple[np.random.Generator, int, int]:
    """(sampling rng, init seed, shuffle seed) for one trial, independent of other trials."""
    ss = np.random.SeedSequence([seed, trial_id])
    sample, init, shuffle = ss.spawn(3)
    return (np.random.default_rng(sample), int(init.generate_state(1)[0]),
            int(shuffle.generate_state(1)[0]))


def regenerate_config(space: SearchSpace, seed: int, trial_id: int) -> NONConfig:
    return sample_config(space, trial_seeds(seed, trial_id)[0])


@dataclass
class _Job:
    space: SearchSpace
    schema: DatasetSchema
    vocab_sizes: dict
    train: EncodedTable
    valid: EncodedTable
    test: EncodedTable | None
    seed: int


def _run_trial(job: _Job, trial_id: int) -> tuple[TrialRecord, dict | None]:
    rng, init_seed, shuffle_seed = trial_seeds(job.seed, trial_id)
    t0 = time.perf_counter()
    config = sample_config(job.space, rng)
    rec = TrialRecord(trial_id, job.seed, json.loads(json.dumps(config.to_dict())))
    try:
        model = NONModel(config, job.schema, job.vocab_sizes, seed=init_seed)
        report = fit(model, job.train, job.valid, seed=shuffle_seed)
        rec.valid_auc = report.best_valid_auc
        rec.epochs_run = report.epochs_run
        rec.best_epoch = report.best_epoch
        if job.test is not None:
            rec.test_auc, _ = evaluate(model, job.test)
        state = model.state_dict()
    except Exception as exc:  # a failed trial is recorded, not fatal
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        state = None
    rec.seconds = time.perf_counter() - t0
    return rec, state


def select_best(records: list[TrialRecord]) -> TrialRecord:
    """Highest validation AUC among successful trials; ties go to the lowest trial id."""
    ok = [r for r in records if r.status == "ok" and not math.isnan(r.valid_auc)]
    if not ok:
        modes = collections.Counter((r.error or "unknown").split(":")[0] for r in records)
        raise SearchError(f"all {len(records)} trials failed: {dict(modes)}")
    return max(ok, key=lambda r: (r.valid_auc, -r.trial_id))


def run_search(space: SearchSpace, schema: DatasetSchema, vocab_sizes: dict, train: EncodedTable,
               valid: EncodedTable, test: EncodedTable | None = None, n_trials: int = 60, seed: int = 0,
               workers: int = 1, sink=None, meta: dict | None = None,
               on_trial: Callable[[TrialRecord], None] | None = None) -> SearchResult:
    """Run ``n_trials`` independent fit+evaluate trials and pick the best by validation AUC.

    ``sink`` is an optional path; each finished trial is appended as one JSON line,
    followed by a summary line; ``meta`` is merged into every line. Records are returned
    ordered by trial id.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    job = _Job(space, schema, vocab_sizes, train, valid, test, seed)
    fh = open(sink, "a", encoding="utf-8") if sink is not None else None
    records: dict[int, TrialRecord] = {}
    best_state, best_key = None, None

    def collect(rec, state):
        nonlocal best_state, best_key
        records[rec.trial_id] = rec
        if fh is not None:
            fh.write(json.dumps({**rec.to_dict(), **(meta or {})}, sort_keys=True) + "\n")
            fh.flush()
        if on_trial is not None:
            on_trial(rec)
        if rec.status == "ok":
            key = (rec.valid_auc, -rec.trial_id)
            if best_key is None or key > best_key:
                best_key, best_state = key, state
        else:
            logger.warning("trial %d failed: %s", rec.trial_id, rec.error)

    try:
        if workers <= 1:
            for t in range(n_trials):
                collect(*_run_trial(job, t))
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                futures = [pool.submit(_run_trial, job, t) for t in range(n_trials)]
                for fut in futures:
                    collect(*fut.result())
        ordered = [records[t] for t in range(n_trials)]
        result = SearchResult(ordered, select_best(ordered), best_state)
        if fh is not None:
            fh.write(json.dumps({**result.summary(), **(meta or {})}, sort_keys=True) + "\n")
        return result
    finally:
        if fh is not None:
            fh.close()


def read_records(path) -> tuple[list[TrialRecord], dict | None]:
    records, summary = [], None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            if d.get("summary"):
                summary = d
            else:
                records.append(TrialRecord.from_dict(d))
    return records, summary
