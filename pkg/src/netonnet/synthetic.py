"""Synthetic tabular generators for smoke tests, demos and the acceptance suite."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import DatasetSchema, EncodedTable, FieldSpec


@dataclass
class SyntheticData:
    schema: DatasetSchema
    vocab_sizes: dict[str, int]
    table: EncodedTable


def _schema(n_cat, n_num):
    fields = [FieldSpec(f"cat{i}", "categorical") for i in range(n_cat)]
    fields += [FieldSpec(f"num{i}", "numerical") for i in range(n_num)]
    return DatasetSchema(tuple(fields), label="label")


def separable(n_rows: int = 1000, n_cat: int = 5, n_num: int = 3, cardinality: int = 10, seed=0) -> SyntheticData:
    """Labels are the sign of a linear score over per-value effects and numerical values."""
    rng = np.random.default_rng(seed)
    schema = _schema(n_cat, n_num)
    # index 0 is the unknown bucket; real values use 1..cardinality
    cat = rng.integers(1, cardinality + 1, size=(n_rows, n_cat))
    num = rng.normal(size=(n_rows, n_num))
    effects = rng.normal(size=(n_cat, cardinality + 1))
    weights = rng.normal(size=n_num)
    score = effects[np.arange(n_cat), cat].sum(axis=1) + num @ weights
    labels = (score > np.median(score)).astype(np.int64)
    sizes = {name: cardinality + 1 for name in schema.categorical}
    return SyntheticData(schema, sizes, EncodedTable(cat.astype(np.int64), num, labels))


def intra_field(n_rows: int = 4000, n_cat: int = 4, n_num: int = 4, cardinality: int = 30, seed=0,
                noise: float = 0.5) -> SyntheticData:
    """Label built additively from per-field nonlinear terms.

    Each numerical field contributes its own nonlinear curve of the value and each
    categorical field a value effect passed through a field-specific nonlinearity,
    so the signal decomposes along field boundaries.
    """
    rng = np.random.default_rng(seed)
    schema = _schema(n_cat, n_num)
    cat = rng.integers(1, cardinality + 1, size=(n_rows, n_cat))
    num = rng.normal(size=(n_rows, n_num))
    latent = rng.normal(size=(n_cat, cardinality + 1))
    curves = [np.abs, np.cos, lambda x: x * x - 1.0, lambda x: np.sin(2 * x)]
    score = np.zeros(n_rows)
    for i in range(n_cat):
        score += np.tanh(2 * latent[i, cat[:, i]])
    for j in range(n_num):
        score += 1.5 * curves[j % len(curves)](num[:, j])
    score += noise * rng.normal(size=n_rows)
    labels = (score > np.median(score)).astype(np.int64)
    sizes = {name: cardinality + 1 for name in schema.categorical}
    return SyntheticData(schema, sizes, EncodedTable(cat.astype(np.int64), num, labels))


def write_csv(data: SyntheticData, path, rows=None) -> None:
    """Write raw values (categorical as ``v<index>``) so the file can go through ``prepare``."""
    t = data.table
    idx = range(len(t)) if rows is None else rows
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter=data.schema.delimiter, lineterminator="\n")
        w.writerow(data.schema.names + [data.schema.label])
        cj = {n: k for k, n in enumerate(data.schema.categorical)}
        nj = {n: k for k, n in enumerate(data.schema.numerical)}
        for r in idx:
            cells = []
            for f in data.schema.fields:
                if f.kind == "categorical":
                    cells.append(f"v{t.categorical[r, cj[f.name]]}")
                else:
                    cells.append(repr(float(t.numerical[r, nj[f.name]])))
            w.writerow(cells + [str(int(t.labels[r]))])
