"""Architecture and training hyperparameters."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace

OPERATIONS = ("lr", "dnn", "bi_interaction", "attention")
OPTIONAL_OPERATIONS = ("lr", "bi_interaction", "attention")
REFINEMENTS = ("none", "concat", "product", "gate")
FIELD_WISE_MULTIPLIERS = (0.5, 1.0, 1.5, 2.0, 3.0)

_ALIASES = {
    "lr": "lr", "linear": "lr",
    "dnn": "dnn", "deep": "dnn",
    "bi": "bi_interaction", "bi_interaction": "bi_interaction", "fm": "bi_interaction",
    "att": "attention", "attention": "attention", "self_attention": "attention",
}


class ConfigError(ValueError):
    pass


def parse_operations(spec) -> tuple[str, ...]:
    """Canonical, ordered operation tuple from a comma string or an iterable of names."""
    names = spec.split(",") if isinstance(spec, str) else list(spec)
    out = set()
    for raw in names:
        key = raw.strip().lower().replace("-", "_")
        if not key:
            continue
        if key not in _ALIASES:
            raise ConfigError(f"unknown operation {raw!r}; choose from {OPERATIONS}")
        out.add(_ALIASES[key])
    return tuple(op for op in OPERATIONS if op in out)


@dataclass(frozen=True)
class FieldGroup:
    """Fields sharing one field-wise network shape.

    ``multipliers`` gives the hidden widths as multiples of d, so depth is
    ``len(multipliers) + 1``; the last layer always maps back to d. ``depth=0``
    leaves the group's embeddings untouched. An empty ``fields`` tuple claims
    every field no other group names.
    """

    depth: int = 1
    multipliers: tuple[float, ...] = ()
    fields: tuple[str, ...] = ()

    def widths(self, d: int) -> list[int]:
        return [max(1, int(round(mult * d))) for mult in self.multipliers] + [d]


@dataclass(frozen=True)
class FieldWiseConfig:
    groups: tuple[FieldGroup, ...] = (FieldGroup(),)
    refinement: str = "none"

    @classmethod
    def disabled(cls) -> FieldWiseConfig:
        return cls(groups=(FieldGroup(depth=0),), refinement="none")

    @property
    def enabled(self) -> bool:
        return any(g.depth > 0 for g in self.groups)


@dataclass(frozen=True)
class NONConfig:
    embedding_dim: int = 16
    field_wise: FieldWiseConfig = field(default_factory=FieldWiseConfig)
    operations: tuple[str, ...] = ("lr", "dnn", "bi_interaction", "attention")
    dnn_widths: tuple[int, ...] = (64, 64)
    attention_heads: int = 2
    attention_dim: int = 8
    fusion_widths: tuple[int, ...] = (64,)
    aux_dnn: bool = True
    aux_fusion: bool = True
    aux_field_wise: bool = False
    # training
    learning_rate: float = 0.1
    batch_size: int = 256
    alpha: float = 0.5
    alpha_decay: float = 1.0
    gamma: float = 1e-5
    epochs: int = 10
    patience: int = 3

    def __post_init__(self):
        object.__setattr__(self, "operations", parse_operations(self.operations))
        object.__setattr__(self, "dnn_widths", tuple(self.dnn_widths))
        object.__setattr__(self, "fusion_widths", tuple(self.fusion_widths))
        validate(self)

    def replace(self, **changes) -> NONConfig:
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> NONConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model/training keys: {sorted(unknown)}")
        if "field_wise" in d and isinstance(d["field_wise"], dict):
            fw = dict(d["field_wise"])
            extra = set(fw) - {"groups", "refinement"}
            if extra:
                raise ConfigError(f"unknown field_wise keys: {sorted(extra)}")
            groups = []
            for g in fw.get("groups", [{}]):
                extra = set(g) - {"depth", "multipliers", "fields"}
                if extra:
                    raise ConfigError(f"unknown field-wise group keys: {sorted(extra)}")
                groups.append(FieldGroup(int(g.get("depth", 1)),
                                         tuple(float(x) for x in g.get("multipliers", ())),
                                         tuple(str(x) for x in g.get("fields", ()))))
            d["field_wise"] = FieldWiseConfig(tuple(groups), str(fw.get("refinement", "none")))
        if "operations" in d:
            d["operations"] = parse_operations(d["operations"])
        for key in ("dnn_widths", "fusion_widths"):
            if key in d:
                d[key] = tuple(int(x) for x in d[key])
        return cls(**d)

    def hash(self) -> str:
        return config_hash(self.to_dict())


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def validate(c: NONConfig) -> None:
    if c.embedding_dim < 1:
        raise ConfigError("embedding_dim must be >= 1")
    ops = c.operations
    if "dnn" not in ops:
        raise ConfigError("the dnn operation is mandatory")
    if not c.dnn_widths or any(w < 1 for w in c.dnn_widths):
        raise ConfigError("dnn_widths needs at least one positive width")
    if "attention" in ops and (c.attention_heads < 1 or c.attention_dim < 1):
        raise ConfigError("attention needs heads >= 1 and dim >= 1")
    if any(w < 1 for w in c.fusion_widths):
        raise ConfigError("fusion widths must be positive")
    fw = c.field_wise
    if fw.refinement not in REFINEMENTS:
        raise ConfigError(f"unknown refinement {fw.refinement!r}; choose from {REFINEMENTS}")
    if not fw.groups:
        raise ConfigError("field_wise needs at least one group")
    for g in fw.groups:
        if g.depth < 0:
            raise ConfigError("field-wise depth must be >= 0")
        if len(g.multipliers) != max(g.depth - 1, 0):
            raise ConfigError(f"field-wise group of depth {g.depth} needs {max(g.depth - 1, 0)} multipliers, "
                              f"got {len(g.multipliers)}")
        bad = [x for x in g.multipliers if x not in FIELD_WISE_MULTIPLIERS]
        if bad:
            raise ConfigError(f"field-wise multipliers {bad} not in {FIELD_WISE_MULTIPLIERS}")
    if sum(1 for g in fw.groups if not g.fields) > 1:
        raise ConfigError("at most one field-wise group may claim the remaining fields")
    if c.learning_rate <= 0 or c.batch_size < 1 or c.epochs < 1 or c.patience < 1:
        raise ConfigError("learning_rate > 0, batch_size >= 1, epochs >= 1 and patience >= 1 are required")
    if c.alpha < 0 or c.gamma < 0 or not 0 < c.alpha_decay <= 1:
        raise ConfigError("alpha >= 0, gamma >= 0 and alpha_decay in (0, 1] are required")
