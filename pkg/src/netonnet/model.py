"""Network On Network: field-wise networks, across-field operations, operation fusion.

Data flow for one batch::

    embed_batch -> field_wise_forward -> {op_linear, op_deep, op_bi_interaction,
    op_self_attention} -> fuse_operations -> logit

Every trainable array lives in ``NONModel.params`` under a dotted name; the
layout is fixed by :func:`parameter_specs`, a pure function of the config,
schema and vocabulary sizes.

Embedding tables are stored row-major as (n_i, d): row k is the embedding of
feature index k.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ConfigError, NONConfig, config_hash
from .data import Batch, DatasetSchema
from .tensor import Tensor


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple
    init: str                 # "glorot" | "embedding" | "zeros"
    owner: str                # component the parameter belongs to
    decayed: bool = False     # included in the L2 penalty
    fan: tuple = (0, 0)


@dataclass(frozen=True)
class ResolvedGroup:
    index: int
    depth: int
    widths: tuple[int, ...]
    fields: tuple[int, ...]   # positions in schema field order


def resolve_groups(config: NONConfig, schema: DatasetSchema) -> list[ResolvedGroup]:
    names = schema.names
    claimed = {}
    for gi, g in enumerate(config.field_wise.groups):
        for f in g.fields:
            if f not in names:
                raise ConfigError(f"field-wise group {gi} names unknown field {f!r}")
            if f in claimed:
                raise ConfigError(f"field {f!r} assigned to field-wise groups {claimed[f]} and {gi}")
            claimed[f] = gi
    out = []
    rest = [i for i, n in enumerate(names) if n not in claimed]
    for gi, g in enumerate(config.field_wise.groups):
        members = tuple(rest) if not g.fields else tuple(names.index(f) for f in g.fields)
        if members:
            out.append(ResolvedGroup(gi, g.depth, tuple(g.widths(config.embedding_dim)), members))
    covered = sorted(i for grp in out for i in grp.fields)
    if covered != list(range(len(names))):
        missing = [names[i] for i in range(len(names)) if i not in covered]
        raise ConfigError(f"fields {missing} belong to no field-wise group")
    return out


def refined_dim(config: NONConfig) -> int:
    d = config.embedding_dim
    return 2 * d if config.field_wise.refinement == "concat" else d


def operation_output_dims(config: NONConfig, schema: DatasetSchema) -> dict[str, int]:
    dims = {}
    for op in config.operations:
        if op == "lr":
            dims[op] = 1
        elif op == "dnn":
            dims[op] = config.dnn_widths[-1]
        elif op == "bi_interaction":
            dims[op] = refined_dim(config)
        elif op == "attention":
            dims[op] = schema.m * config.attention_heads * config.attention_dim
    return dims


def _dense(prefix, fan_in, fan_out, owner):
    return [ParamSpec(f"{prefix}.w", (fan_in, fan_out), "glorot", owner, True, (fan_in, fan_out)),
            ParamSpec(f"{prefix}.b", (fan_out,), "zeros", owner)]


def parameter_specs(config: NONConfig, schema: DatasetSchema, vocab_sizes: dict[str, int]) -> list[ParamSpec]:
    d = config.embedding_dim
    dr = refined_dim(config)
    specs = []
    for name in schema.categorical:
        specs.append(ParamSpec(f"emb.cat.{name}", (vocab_sizes[name], d), "embedding", "embedding"))
    for name in schema.numerical:
        specs.append(ParamSpec(f"emb.num.{name}", (d,), "embedding", "embedding"))

    for g in resolve_groups(config, schema):
        c = len(g.fields)
        fan_in = d
        for l, w in enumerate(g.widths[:g.depth] if g.depth else ()):
            specs.append(ParamSpec(f"fw.g{g.index}.layer{l}.w", (c, fan_in, w), "glorot", "field_wise", True, (fan_in, w)))
            specs.append(ParamSpec(f"fw.g{g.index}.layer{l}.b", (c, 1, w), "zeros", "field_wise"))
            if config.aux_field_wise:
                specs.append(ParamSpec(f"fw.g{g.index}.aux{l}.w", (c, w, 1), "glorot", "field_wise", True, (w, 1)))
            fan_in = w
        if config.field_wise.refinement == "gate":
            specs.append(ParamSpec(f"fw.g{g.index}.gate.w", (c, 2 * d, d), "glorot", "field_wise", True, (2 * d, d)))
            specs.append(ParamSpec(f"fw.g{g.index}.gate.b", (c, 1, d), "zeros", "field_wise"))

    if "lr" in config.operations:
        for name in schema.categorical:
            specs.append(ParamSpec(f"lr.cat.{name}", (vocab_sizes[name], 1), "zeros", "lr"))
        if schema.numerical:
            specs.append(ParamSpec("lr.num", (len(schema.numerical), 1), "zeros", "lr"))
        specs.append(ParamSpec("lr.bias", (1,), "zeros", "lr"))

    fan_in = schema.m * dr
    for l, w in enumerate(config.dnn_widths):
        specs += _dense(f"dnn.layer{l}", fan_in, w, "dnn")
        if config.aux_dnn:
            specs.append(ParamSpec(f"dnn.aux{l}.w", (w, 1), "glorot", "dnn", True, (w, 1)))
        fan_in = w

    if "attention" in config.operations:
        hd = config.attention_heads * config.attention_dim
        for part in ("query", "key", "value"):
            specs.append(ParamSpec(f"att.{part}", (dr, hd), "glorot", "attention", True, (dr, hd)))
        specs.append(ParamSpec("att.output", (hd, hd), "glorot", "attention", True, (hd, hd)))

    fan_in = sum(operation_output_dims(config, schema).values())
    for l, w in enumerate(config.fusion_widths):
        specs += _dense(f"fusion.layer{l}", fan_in, w, "fusion")
        if config.aux_fusion:
            specs.append(ParamSpec(f"fusion.aux{l}.w", (w, 1), "glorot", "fusion", True, (w, 1)))
        fan_in = w
    specs += _dense("fusion.out", fan_in, 1, "fusion")
    return specs


def parameter_count(config: NONConfig, schema: DatasetSchema, vocab_sizes: dict[str, int]) -> int:
    return sum(int(np.prod(s.shape)) for s in parameter_specs(config, schema, vocab_sizes))


def operation_parameter_count(config: NONConfig, schema: DatasetSchema, vocab_sizes: dict[str, int], op: str) -> int:
    """Parameters an operation brings: its own arrays plus its rows of the first fusion weight."""
    own = sum(int(np.prod(s.shape)) for s in parameter_specs(config, schema, vocab_sizes) if s.owner == op)
    first = config.fusion_widths[0] if config.fusion_widths else 1
    return own + operation_output_dims(config, schema)[op] * first


def _init(spec: ParamSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.init == "zeros":
        return np.zeros(spec.shape)
    if spec.init == "embedding":
        return rng.uniform(-0.01, 0.01, size=spec.shape)
    limit = math.sqrt(6.0 / (spec.fan[0] + spec.fan[1]))
    return rng.uniform(-limit, limit, size=spec.shape)


class NONModel:
    def __init__(self, config: NONConfig, schema: DatasetSchema, vocab_sizes: dict[str, int], seed=0):
        self.config = config
        self.schema = schema
        self.vocab_sizes = {k: int(vocab_sizes[k]) for k in schema.categorical}
        self.groups = resolve_groups(config, schema)
        self.specs = parameter_specs(config, schema, self.vocab_sizes)
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {
            s.name: Tensor(_init(s, rng), requires_grad=True, name=s.name) for s in self.specs
        }
        self._cat_col = {n: j for j, n in enumerate(schema.categorical)}
        self._num_col = {n: j for j, n in enumerate(schema.numerical)}

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def decayed_parameters(self) -> list[Tensor]:
        return [self.params[s.name] for s in self.specs if s.decayed]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.values.copy() for k, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise CheckpointError(f"parameter names differ (missing {sorted(missing)}, extra {sorted(extra)})")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise CheckpointError(f"{k}: shape {state[k].shape} does not match {p.shape}")
            p.values = np.array(state[k], dtype=np.float64)

    def forward(self, batch: Batch, training: bool = False):
        return non_forward(batch, self, training)

    def predict_logits(self, batch: Batch) -> np.ndarray:
        with T.no_grad():
            logit, _ = non_forward(batch, self, training=False)
        return logit.values


# ------------------------------------------------------------------ pieces

def embed_batch(batch: Batch, model: NONModel) -> list[Tensor]:
    """One (b, d) embedding per field, in schema order."""
    out = []
    for f in model.schema.fields:
        if f.kind == "categorical":
            idx = batch.categorical[:, model._cat_col[f.name]]
            out.append(T.take_rows(model.params[f"emb.cat.{f.name}"], idx))
        else:
            x = Tensor(batch.numerical[:, model._num_col[f.name]:model._num_col[f.name] + 1])
            out.append(T.mul(x, model.params[f"emb.num.{f.name}"]))
    return out


def refine(e_prime: Tensor, e: Tensor, mode: str, gate: tuple[Tensor, Tensor] | None = None) -> Tensor:
    """Combine a field-wise output with the embedding it came from.

    Works on (b, d) or stacked (c, b, d) inputs; stacked gate weights are (c, 2d, d).
    """
    if mode == "none":
        return e_prime
    if mode == "concat":
        return T.concat([e_prime, e], axis=-1)
    if mode == "product":
        return T.mul(e_prime, e)
    if mode == "gate":
        if gate is None:
            raise ConfigError("gate refinement needs gate weights")
        w, b = gate
        both = T.concat([e_prime, e], axis=-1)
        lin = T.batched_matmul(both, w) if both.ndim == 3 else T.matmul(both, w)
        g = T.sigmoid(T.bias_add(lin, b))
        return T.add(T.mul(g, e_prime), T.mul(T.sub(1.0, g), e))
    raise ConfigError(f"unknown refinement mode {mode!r}")


def field_wise_forward(embeddings: list[Tensor], model: NONModel):
    """Per-field DNNs run as stacked batched matmuls, one stack per group.

    Returns the refined embeddings and, when field-wise auxiliary heads are on,
    their logits.
    """
    params, mode = model.params, model.config.field_wise.refinement
    refined: list[Tensor | None] = [None] * len(embeddings)
    aux = []
    for g in model.groups:
        x0 = T.stack([embeddings[i] for i in g.fields], axis=0)
        x = x0
        for l in range(g.depth):
            x = T.bias_add(T.batched_matmul(x, params[f"fw.g{g.index}.layer{l}.w"]),
                           params[f"fw.g{g.index}.layer{l}.b"])
            if l < g.depth - 1:
                x = T.relu(x)
            if model.config.aux_field_wise:
                a = T.batched_matmul(x, params[f"fw.g{g.index}.aux{l}.w"])
                aux += [T.reshape(T.getitem(a, k), (-1,)) for k in range(len(g.fields))]
        gate = None
        if mode == "gate":
            gate = (params[f"fw.g{g.index}.gate.w"], params[f"fw.g{g.index}.gate.b"])
        out = refine(x, x0, mode, gate)
        for k, i in enumerate(g.fields):
            refined[i] = T.getitem(out, k)
    return refined, aux


def field_wise_single(model: NONModel, field_index: int, e: Tensor) -> Tensor:
    """Refined output for one field's embeddings (s, d), using that field's slice of its group."""
    params, mode = model.params, model.config.field_wise.refinement
    g = next(g for g in model.groups if field_index in g.fields)
    k = g.fields.index(field_index)
    x = e
    for l in range(g.depth):
        x = T.bias_add(T.matmul(x, T.getitem(params[f"fw.g{g.index}.layer{l}.w"], k)),
                       T.getitem(params[f"fw.g{g.index}.layer{l}.b"], k))
        if l < g.depth - 1:
            x = T.relu(x)
    gate = None
    if mode == "gate":
        gate = (T.getitem(params[f"fw.g{g.index}.gate.w"], k), T.getitem(params[f"fw.g{g.index}.gate.b"], k))
    return refine(x, e, mode, gate)


def op_linear(batch: Batch, model: NONModel) -> Tensor:
    """Logistic-regression logit on the raw features, (b, 1)."""
    params = model.params
    out = T.add(Tensor(np.zeros((batch.size, 1))), params["lr.bias"])
    for j, name in enumerate(model.schema.categorical):
        out = T.add(out, T.take_rows(params[f"lr.cat.{name}"], batch.categorical[:, j]))
    if model.schema.numerical:
        out = T.add(out, T.matmul(Tensor(batch.numerical), params["lr.num"]))
    return out


def op_bi_interaction(embeddings: list[Tensor]) -> Tensor:
    """Sum over field pairs i<j of e_i * e_j, (b, d).

    Numerical embeddings already carry their feature value and categorical ones
    have value 1, so no extra scaling is applied here.
    """
    return T.bi_interaction(T.stack(embeddings, axis=1))


def op_self_attention(x: Tensor, query: Tensor, key: Tensor, value: Tensor, output: Tensor,
                      heads: int, dim: int):
    """Multi-head scaled dot-product attention across fields.

    ``x`` is (b, m, d); returns the flattened (b, m * heads * dim) output and
    the (b, heads, m, m) attention weights.
    """
    b, m, d = x.shape
    flat = T.reshape(x, (b * m, d))

    def split(w):
        h = T.reshape(T.matmul(flat, w), (b, m, heads, dim))
        return T.reshape(T.transpose(h, (0, 2, 1, 3)), (b * heads, m, dim))

    q, k, v = split(query), split(key), split(value)
    scores = T.scale(T.batched_matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dim))
    weights = T.softmax(scores, axis=-1)
    ctx = T.batched_matmul(weights, v)
    ctx = T.reshape(T.transpose(T.reshape(ctx, (b, heads, m, dim)), (0, 2, 1, 3)), (b * m, heads * dim))
    out = T.reshape(T.matmul(ctx, output), (b, m * heads * dim))
    return out, weights.values.reshape(b, heads, m, m)


def _mlp(x: Tensor, model: NONModel, prefix: str, n_layers: int):
    hiddens = []
    for l in range(n_layers):
        x = T.relu(T.bias_add(T.matmul(x, model.params[f"{prefix}.layer{l}.w"]),
                              model.params[f"{prefix}.layer{l}.b"]))
        hiddens.append(x)
    return x, hiddens


def op_deep(embeddings: list[Tensor], model: NONModel):
    """Fully connected ReLU tower over the concatenated embeddings; returns (h_last, all hidden states)."""
    return _mlp(T.concat(embeddings, axis=1), model, "dnn", len(model.config.dnn_widths))


def fuse_operations(outputs: list[Tensor], model: NONModel):
    """DNN over the concatenated operation outputs ending in one logit per row.

    With no hidden layers this is the weighted sum w^T [o_1, ..., o_k] + b.
    """
    x = T.concat(outputs, axis=1)
    h, hiddens = _mlp(x, model, "fusion", len(model.config.fusion_widths))
    logit = T.bias_add(T.matmul(h, model.params["fusion.out.w"]), model.params["fusion.out.b"])
    return T.reshape(logit, (-1,)), hiddens


def non_forward(batch: Batch, model: NONModel, training: bool = False):
    """Final logit (b,) and the auxiliary logits (empty unless ``training``)."""
    cfg = model.config
    embeddings = embed_batch(batch, model)
    refined, fw_aux = field_wise_forward(embeddings, model)
    outputs = []
    dnn_hiddens = []
    for op in cfg.operations:
        if op == "lr":
            outputs.append(op_linear(batch, model))
        elif op == "dnn":
            h, dnn_hiddens = op_deep(refined, model)
            outputs.append(h)
        elif op == "bi_interaction":
            outputs.append(op_bi_interaction(refined))
        elif op == "attention":
            p = model.params
            out, _ = op_self_attention(T.stack(refined, axis=1), p["att.query"], p["att.key"], p["att.value"],
                                       p["att.output"], cfg.attention_heads, cfg.attention_dim)
            outputs.append(out)
    logit, fusion_hiddens = fuse_operations(outputs, model)
    aux = []
    if training:
        if cfg.aux_field_wise:
            aux += fw_aux
        if cfg.aux_dnn:
            aux += [T.reshape(T.matmul(h, model.params[f"dnn.aux{l}.w"]), (-1,)) for l, h in enumerate(dnn_hiddens)]
        if cfg.aux_fusion:
            aux += [T.reshape(T.matmul(h, model.params[f"fusion.aux{l}.w"]), (-1,))
                    for l, h in enumerate(fusion_hiddens)]
    return logit, aux


def count_aux_heads(config: NONConfig, schema: DatasetSchema) -> int:
    n = 0
    if config.aux_dnn:
        n += len(config.dnn_widths)
    if config.aux_fusion:
        n += len(config.fusion_widths)
    if config.aux_field_wise:
        groups = resolve_groups(config, schema)
        n += sum(g.depth * len(g.fields) for g in groups)
    return n


def time_complexity(config: NONConfig, schema: DatasetSchema) -> dict[str, int]:
    """Per-row multiply-add estimates for each component, mirroring the usual big-O terms."""
    d, m = config.embedding_dim, schema.m
    out = {"field_wise": 0}
    for g in resolve_groups(config, schema):
        fan_in = d
        for w in g.widths[:g.depth]:
            out["field_wise"] += len(g.fields) * fan_in * w
            fan_in = w
    dr = refined_dim(config)
    widths = [m * dr, *config.dnn_widths]
    if "lr" in config.operations:
        out["lr"] = m
    out["dnn"] = sum(a * b for a, b in zip(widths, widths[1:]))
    if "bi_interaction" in config.operations:
        out["bi_interaction"] = m * m * dr
    if "attention" in config.operations:
        hd = config.attention_heads * config.attention_dim
        out["attention"] = m * m * hd + m * hd * dr
    fusion = [sum(operation_output_dims(config, schema).values()), *config.fusion_widths, 1]
    out["fusion"] = sum(a * b for a, b in zip(fusion, fusion[1:]))
    return out


# -------------------------------------------------------------- checkpoint

def save_checkpoint(path, model: NONModel, *, trained: bool, vocab_ref: str | None = None,
                    extra: dict | None = None) -> None:
    meta = {
        "config": model.config.to_dict(),
        "config_hash": model.config.hash(),
        "schema": model.schema.to_dict(),
        "schema_hash": model.schema.hash(),
        "vocab_sizes": model.vocab_sizes,
        "vocab_ref": vocab_ref,
        "trained": bool(trained),
        **(extra or {}),
    }
    arrays = {f"param/{k}": v for k, v in model.state_dict().items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path, schema: DatasetSchema | None = None) -> tuple[NONModel, dict]:
    """Rebuild a model; fails if ``schema`` is given and its hash differs from the stored one."""
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with np.load(path) as z:
            meta = json.loads(str(z["__meta__"]))
            state = {k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path} is not a readable checkpoint: {exc}") from None
    stored = DatasetSchema.from_dict(meta["schema"])
    if stored.hash() != meta["schema_hash"]:
        raise CheckpointError(f"{path}: stored schema does not match its recorded hash")
    if schema is not None and schema.hash() != meta["schema_hash"]:
        raise CheckpointError(f"{path}: schema hash {meta['schema_hash']} does not match "
                              f"the current schema ({schema.hash()})")
    model = NONModel(NONConfig.from_dict(meta["config"]), stored, meta["vocab_sizes"])
    model.load_state_dict(state)
    return model, meta
