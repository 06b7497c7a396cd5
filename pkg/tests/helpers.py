import numpy as np

from netonnet.config import FieldGroup, FieldWiseConfig, NONConfig
from netonnet.data import Batch, DatasetSchema, FieldSpec


def tiny_schema(n_cat=4, n_num=2):
    fields = [FieldSpec(f"c{i}", "categorical") for i in range(n_cat)]
    fields += [FieldSpec(f"n{i}", "numerical") for i in range(n_num)]
    return DatasetSchema(fields=tuple(fields), label="y")


def vocab_sizes(schema, n=5):
    return {name: n + i for i, name in enumerate(schema.categorical)}


def random_batch(schema, sizes, b=4, seed=0):
    rng = np.random.default_rng(seed)
    cat = np.stack([rng.integers(0, sizes[n], b) for n in schema.categorical], axis=1) if schema.categorical \
        else np.zeros((b, 0), dtype=np.int64)
    num = rng.normal(size=(b, len(schema.numerical)))
    labels = np.array([i % 2 for i in range(b)])
    return Batch(cat.astype(np.int64), num, labels, np.arange(b))


def tiny_config(**kw):
    base = dict(
        embedding_dim=8,
        field_wise=FieldWiseConfig((FieldGroup(2, (1.5,)),), "gate"),
        operations=("lr", "dnn", "bi_interaction", "attention"),
        dnn_widths=(8, 6),
        attention_heads=2,
        attention_dim=3,
        fusion_widths=(5,),
    )
    base.update(kw)
    return NONConfig(**base)


def randomize(model, scale=0.5, seed=0):
    """Replace every parameter with N(0, scale^2) draws so no gradient is vanishingly small."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.values = rng.normal(scale=scale, size=p.shape)
