"""Tabular data preparation: schema, vocabulary, normalisation, encoding, batching.

Categorical values seen fewer than ``threshold`` times in the training rows,
missing cells, and values never seen in training all share index 0.
Numerical fields are z-scored with training-split statistics; missing
numerical cells encode to 0.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import yaml

UNKNOWN = 0
UNKNOWN_LABEL = "<unknown>"
KINDS = ("categorical", "numerical")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class FieldSpec:
    name: str
    kind: str


@dataclass(frozen=True)
class DatasetSchema:
    fields: tuple[FieldSpec, ...]
    label: str
    delimiter: str = ","

    def __post_init__(self):
        names = [f.name for f in self.fields]
        if not names:
            raise DataError("schema declares no feature fields")
        if len(set(names)) != len(names):
            raise DataError(f"duplicate field names in schema: {names}")
        if self.label in names:
            raise DataError(f"label column {self.label!r} is also declared as a field")
        for f in self.fields:
            if f.kind not in KINDS:
                raise DataError(f"field {f.name!r}: kind must be one of {KINDS}, got {f.kind!r}")
        if len(self.delimiter) != 1:
            raise DataError(f"delimiter must be a single character, got {self.delimiter!r}")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.fields]

    @property
    def categorical(self) -> list[str]:
        return [f.name for f in self.fields if f.kind == "categorical"]

    @property
    def numerical(self) -> list[str]:
        return [f.name for f in self.fields if f.kind == "numerical"]

    @property
    def m(self) -> int:
        return len(self.fields)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "delimiter": self.delimiter,
            "fields": [{"name": f.name, "kind": f.kind} for f in self.fields],
        }

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSchema:
        unknown = set(d) - {"label", "delimiter", "fields"}
        if unknown:
            raise DataError(f"unknown schema keys: {sorted(unknown)}")
        try:
            fields = tuple(FieldSpec(str(f["name"]), str(f["kind"])) for f in d["fields"])
            return cls(fields=fields, label=str(d["label"]), delimiter=str(d.get("delimiter", ",")))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed schema: {exc}") from None

    @classmethod
    def load(cls, path) -> DatasetSchema:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class RawRow:
    line: int
    cells: dict[str, str]


def read_rows(path, schema: DatasetSchema) -> list[RawRow]:
    """Read a delimited UTF-8 file with a header row."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        missing = [c for c in schema.names + [schema.label] if c not in header]
        if missing:
            raise DataError(f"{path}: header lacks columns {missing}")
        rows = []
        for line, values in enumerate(reader, start=2):
            if not values:
                continue
            if len(values) != len(header):
                raise DataError(f"{path}: line {line}: expected {len(header)} cells, got {len(values)}")
            rows.append(RawRow(line, dict(zip(header, values))))
    return rows


@dataclass
class Vocabulary:
    threshold: int
    maps: dict[str, dict[str, int]]

    def size(self, name: str) -> int:
        """n_i, including the unknown slot."""
        return len(self.maps[name]) + 1

    def sizes(self) -> dict[str, int]:
        return {k: self.size(k) for k in self.maps}

    def index(self, name: str, value: str) -> int:
        return self.maps[name].get(value, UNKNOWN)

    def inverse(self, name: str) -> list[str]:
        out = [UNKNOWN_LABEL] * self.size(name)
        for value, i in self.maps[name].items():
            out[i] = value
        return out

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "maps": self.maps}

    @classmethod
    def from_dict(cls, d: dict) -> Vocabulary:
        return cls(int(d["threshold"]), {k: dict(v) for k, v in d["maps"].items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> Vocabulary:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocabulary(rows: list[RawRow], schema: DatasetSchema, threshold: int = 5) -> Vocabulary:
    if threshold < 1:
        raise DataError(f"threshold must be >= 1, got {threshold}")
    if not rows:
        raise DataError("cannot build a vocabulary from an empty training set")
    maps = {}
    for name in schema.categorical:
        counts = Counter(r.cells[name] for r in rows if r.cells[name] != "")
        kept = sorted((v for v, c in counts.items() if c >= threshold), key=lambda v: (-counts[v], v))
        maps[name] = {v: i for i, v in enumerate(kept, start=1)}
    return Vocabulary(threshold, maps)


@dataclass
class NormalizationStats:
    mean: dict[str, float]
    std: dict[str, float]

    def encode(self, name: str, cell: str, line: int = 0) -> float:
        if cell == "":
            return 0.0
        x = _parse_float(cell, name, line)
        s = self.std[name]
        return 0.0 if s == 0.0 else (x - self.mean[name]) / s

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_dict(cls, d: dict) -> NormalizationStats:
        return cls({k: float(v) for k, v in d["mean"].items()}, {k: float(v) for k, v in d["std"].items()})

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path) -> NormalizationStats:
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _parse_float(cell: str, name: str, line: int) -> float:
    try:
        x = float(cell)
    except ValueError:
        raise DataError(f"line {line}: field {name!r}: {cell!r} is not a number") from None
    if not math.isfinite(x):
        raise DataError(f"line {line}: field {name!r}: non-finite value {cell!r}")
    return x


def compute_normalization(rows: list[RawRow], schema: DatasetSchema) -> NormalizationStats:
    """Population mean and std per numerical field, ignoring missing cells."""
    if not rows:
        raise DataError("cannot compute normalisation from zero rows")
    mean, std = {}, {}
    for name in schema.numerical:
        xs = np.array([_parse_float(r.cells[name], name, r.line) for r in rows if r.cells[name] != ""])
        if xs.size == 0:
            mean[name], std[name] = 0.0, 0.0
        else:
            mean[name], std[name] = float(xs.mean()), float(xs.std())
    return NormalizationStats(mean, std)


@dataclass
class EncodedTable:
    """Columns in schema order: categorical indices, z-scored numericals, {0,1} labels."""

    categorical: np.ndarray
    numerical: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        n = len(self.labels)
        if self.categorical.shape[0] != n or self.numerical.shape[0] != n:
            raise DataError("row counts of categorical, numerical and labels differ")

    def __len__(self):
        return len(self.labels)

    def take(self, index) -> EncodedTable:
        return EncodedTable(self.categorical[index], self.numerical[index], self.labels[index])

    def save(self, path) -> None:
        np.savez(path, categorical=self.categorical, numerical=self.numerical, labels=self.labels)

    @classmethod
    def load(cls, path) -> EncodedTable:
        with np.load(path) as z:
            return cls(z["categorical"], z["numerical"], z["labels"])


def encode_dataset(rows: list[RawRow], schema: DatasetSchema, vocab: Vocabulary,
                   stats: NormalizationStats) -> EncodedTable:
    cats, nums = schema.categorical, schema.numerical
    n = len(rows)
    categorical = np.zeros((n, len(cats)), dtype=np.int64)
    numerical = np.zeros((n, len(nums)), dtype=np.float64)
    labels = np.zeros(n, dtype=np.int64)
    for r, row in enumerate(rows):
        y = row.cells[schema.label]
        if y not in ("0", "1"):
            raise DataError(f"line {row.line}: label {y!r} is not '0' or '1'")
        labels[r] = int(y)
        for j, name in enumerate(cats):
            categorical[r, j] = vocab.index(name, row.cells[name])
        for j, name in enumerate(nums):
            numerical[r, j] = stats.encode(name, row.cells[name], row.line)
    return EncodedTable(categorical, numerical, labels)


def split_indices(n: int, fraction: float = 0.2, seed=0) -> tuple[np.ndarray, np.ndarray]:
    """Sorted (kept, held-out) row indices; the held-out part has round(fraction * n) rows, clamped to [1, n-1]."""
    if not 0.0 < fraction < 1.0:
        raise DataError(f"validation fraction must lie strictly between 0 and 1, got {fraction}")
    if n < 2:
        raise DataError(f"need at least 2 rows to split, got {n}")
    n_valid = min(max(int(round(fraction * n)), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    return np.sort(perm[n_valid:]), np.sort(perm[:n_valid])


def split_train_valid(table: EncodedTable, fraction: float = 0.2, seed=0) -> tuple[EncodedTable, EncodedTable]:
    """Random disjoint split; validation receives round(fraction * N) rows, order preserved within each part."""
    train_idx, valid_idx = split_indices(len(table), fraction, seed)
    return table.take(train_idx), table.take(valid_idx)


@dataclass(frozen=True)
class Batch:
    categorical: np.ndarray
    numerical: np.ndarray
    labels: np.ndarray
    rows: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.labels)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a)
    a.setflags(write=False)
    return a


def batch_iterator(table: EncodedTable, batch_size: int = 256, shuffle: bool = False,
                   seed=None) -> Iterator[Batch]:
    """One epoch of batches; every row appears exactly once and the last batch may be short.

    ``seed`` may be an int or a ``numpy.random.Generator`` (advanced in place).
    """
    if batch_size < 1:
        raise DataError(f"batch size must be >= 1, got {batch_size}")
    n = len(table)
    if shuffle:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        order = rng.permutation(n)
    else:
        order = np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(_frozen(table.categorical[idx]), _frozen(table.numerical[idx]),
                    _frozen(table.labels[idx]), _frozen(idx))


def table_to_batch(table: EncodedTable) -> Batch:
    return next(batch_iterator(table, batch_size=max(len(table), 1)))
