"""AUC, within-field embedding similarity, and embedding export."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import NONModel, field_wise_single
from .tensor import Tensor

logger = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    pass


def tied_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x), dtype=np.float64)
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(x)]
    for s, e in zip(starts, ends):
        ranks[order[s:e]] = (s + 1 + e) / 2.0
    return ranks


def auc(scores, labels) -> float:
    """Probability that a random positive scores above a random negative, ties counting half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal-length vectors")
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    rank_sum = tied_ranks(scores)[pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mean_pairwise_cosine(vectors: np.ndarray) -> tuple[float, int]:
    """Sum of cosine similarity over all unordered pairs, and the pair count.

    Pairs involving a zero vector contribute 0.
    """
    n = len(vectors)
    norms = np.linalg.norm(vectors, axis=1)
    unit = np.divide(vectors, norms[:, None], out=np.zeros_like(vectors), where=norms[:, None] > 0)
    gram = unit @ unit.T
    iu = np.triu_indices(n, k=1)
    return float(gram[iu].sum()), len(iu[0])


@dataclass
class FieldSimilarityReport:
    before: dict[str, float]
    after: dict[str, float]
    micro_before: float
    micro_after: float
    sample_cap: int
    pairs: dict[str, int] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "before": self.before, "after": self.after,
            "micro_before": self.micro_before, "micro_after": self.micro_after,
            "sample_cap": self.sample_cap, "pairs": self.pairs, "skipped": self.skipped,
        }


def sample_feature_indices(n: int, cap: int, rng: np.random.Generator) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cap, replace=False))


def field_vectors(model: NONModel, name: str, index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw embedding rows and their field-wise outputs for the given feature indices."""
    e = model.params[f"emb.cat.{name}"].values[index]
    with T.no_grad():
        after = field_wise_single(model, model.schema.names.index(name), Tensor(e)).values
    return e, after


def field_similarity(model: NONModel, sample_size: int = 200, seed=0,
                     fields: list[str] | None = None) -> FieldSimilarityReport:
    """Mean pairwise cosine similarity of each categorical field's features, before and after
    the field-wise network, plus micro averages (pair-weighted across fields)."""
    if sample_size < 2:
        raise ValueError("sample_size must be >= 2")
    rng = np.random.default_rng(seed)
    names = fields if fields is not None else model.schema.categorical
    before, after, pairs, skipped = {}, {}, {}, []
    tot_b = tot_a = 0.0
    tot_pairs = 0
    for name in names:
        if name not in model.schema.categorical:
            raise KeyError(f"{name!r} is not a categorical field")
        n = model.vocab_sizes[name]
        if n < 2:
            logger.warning("field %s has fewer than 2 feature values; skipped", name)
            skipped.append(name)
            continue
        idx = sample_feature_indices(n, sample_size, rng)
        e, a = field_vectors(model, name, idx)
        sb, k = mean_pairwise_cosine(e)
        sa, _ = mean_pairwise_cosine(a)
        before[name], after[name], pairs[name] = sb / k, sa / k, k
        tot_b += sb
        tot_a += sa
        tot_pairs += k
    if tot_pairs == 0:
        raise UndefinedMetricError("no categorical field has two or more feature values")
    return FieldSimilarityReport(before, after, tot_b / tot_pairs, tot_a / tot_pairs, sample_size, pairs, skipped)


EXPORT_HEADER = ["field", "value", "stage", "dim"]


def export_embeddings(model: NONModel, fields: list[str], path, vocab=None, sample_size: int = 200,
                      seed=0, delimiter: str = "\t") -> int:
    """Write before/after field-wise vectors for sampled features; returns the number of rows.

    Rows are ordered by field (as given), feature index, then stage.
    Columns: field, value, stage, dim, v0..v{D-1}; shorter vectors leave trailing cells empty.
    """
    for name in fields:
        if name not in model.schema.categorical:
            raise KeyError(f"unknown categorical field {name!r}")
    rng = np.random.default_rng(seed)
    records = []
    for name in fields:
        idx = sample_feature_indices(model.vocab_sizes[name], sample_size, rng)
        labels = vocab.inverse(name) if vocab is not None else None
        e, a = field_vectors(model, name, idx)
        for r, k in enumerate(idx):
            value = labels[k] if labels is not None else str(int(k))
            records.append((name, value, "before", e[r]))
            records.append((name, value, "after", a[r]))
    width = max((len(r[3]) for r in records), default=0)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        w.writerow(EXPORT_HEADER + [f"v{i}" for i in range(width)])
        for name, value, stage, vec in records:
            cells = [repr(float(x)) for x in vec] + [""] * (width - len(vec))
            w.writerow([name, value, stage, len(vec)] + cells)
    return len(records)


def read_embeddings(path, delimiter: str = "\t") -> list[tuple[str, str, str, np.ndarray]]:
    out = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        header = next(reader)
        if header[:4] != EXPORT_HEADER:
            raise ValueError(f"{path}: unexpected header {header[:4]}")
        for row in reader:
            dim = int(row[3])
            out.append((row[0], row[1], row[2], np.array([float(x) for x in row[4:4 + dim]])))
    return out
