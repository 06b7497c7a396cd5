"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
"""
import functools
import itertools
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from helpers import randomize, random_batch, tiny_schema, vocab_sizes  # noqa: E402

from netonnet import synthetic, tensor as T  # noqa: E402
from netonnet.analysis import auc, field_similarity  # noqa: E402
from netonnet.config import FieldGroup, FieldWiseConfig, NONConfig  # noqa: E402
from netonnet.data import (UNKNOWN, DatasetSchema, FieldSpec, batch_iterator, build_vocabulary,  # noqa: E402
                           compute_normalization, encode_dataset, read_rows, split_train_valid)
from netonnet.model import (NONModel, embed_batch, field_wise_forward, non_forward,  # noqa: E402
                            op_bi_interaction)
from netonnet.search import SearchSpace, run_search  # noqa: E402
from netonnet.tensor import Tape, Tensor  # noqa: E402
from netonnet.training import LossConfig, evaluate, fit, total_loss  # noqa: E402

SEEDS = range(5)


def report(n, ok, detail, seconds):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} ({seconds:.1f}s) {detail}"
    print(f"\n{line}", file=sys.__stdout__, flush=True)
    return line


# ---------------------------------------------------------------- 1

def criterion_1():
    t0 = time.perf_counter()
    schema = tiny_schema(4, 2)  # m = 6
    sizes = vocab_sizes(schema)
    combos = [("dnn",) + c for r in range(1, 4) for c in itertools.combinations(("lr", "bi_interaction", "attention"), r)]
    refinements = ("none", "concat", "product", "gate")
    worst = {}
    for k, ops in enumerate(combos):
        fw = FieldWiseConfig((FieldGroup(2, (1.0,)),), refinements[k % 4])
        cfg = NONConfig(embedding_dim=8, field_wise=fw, operations=ops, dnn_widths=(6, 5), attention_heads=2,
                        attention_dim=3, fusion_widths=(4,))
        model = NONModel(cfg, schema, sizes, seed=k)
        randomize(model, 0.4, seed=k)
        batch = random_batch(schema, sizes, b=4, seed=k)
        loss_cfg = LossConfig(alpha=0.7, gamma=1e-3)

        def loss():
            logit, aux = non_forward(batch, model, training=True)
            return total_loss(logit, aux, batch.labels, model.decayed_parameters(), loss_cfg)

        worst["+".join(ops)] = T.grad_check(loss, model.parameters())
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and dt < 60
    return ok, f"7 combos, max rel err {max(worst.values()):.2e} (< 1e-4), budget 60s", dt


# ---------------------------------------------------------------- 2

def _pairwise_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / (len(pos) * len(neg))


def criterion_2():
    t0 = time.perf_counter()
    checks = {}
    schema = tiny_schema(4, 2)
    sizes = vocab_sizes(schema)
    cfg = NONConfig(embedding_dim=8, field_wise=FieldWiseConfig((FieldGroup(3, (2.0, 0.5)),), "none"),
                    operations=("dnn",), dnn_widths=(6,), fusion_widths=())
    model = NONModel(cfg, schema, sizes, seed=0)
    randomize(model, 0.5, seed=0)
    emb = embed_batch(random_batch(schema, sizes, b=5), model)
    stacked, _ = field_wise_forward(emb, model)
    same = True
    for i, e in enumerate(emb):
        x = e
        for l in range(3):
            w = Tensor(model[f"fw.g0.layer{l}.w"].values[i])
            x = T.bias_add(T.matmul(x, w), Tensor(model[f"fw.g0.layer{l}.b"].values[i]))
            if l < 2:
                x = T.relu(x)
        same &= np.array_equal(x.values, stacked[i].values)
    checks["field-wise stacked == loop (bit-identical)"] = bool(same)

    rng = np.random.default_rng(0)
    u = rng.normal(size=(6, 7, 12))
    oracle = sum(u[:, i] * u[:, j] for i in range(7) for j in range(i + 1, 7))
    fast = op_bi_interaction([Tensor(u[:, i]) for i in range(7)]).values
    checks["bi-interaction == double sum (1e-10)"] = bool(np.max(np.abs(fast - oracle)) <= 1e-10)

    scores = rng.integers(0, 30, size=1000).astype(float)
    labels = rng.integers(0, 2, size=1000)
    checks["AUC == pairwise oracle with ties (1e-10)"] = abs(auc(scores, labels) - _pairwise_auc(scores, labels)) <= 1e-10

    dcfg = NONConfig(embedding_dim=8, field_wise=FieldWiseConfig.disabled(), operations=("dnn",),
                     dnn_widths=(7, 5), fusion_widths=())
    dm = NONModel(dcfg, schema, sizes, seed=1)
    randomize(dm, 0.5, seed=1)
    batch = random_batch(schema, sizes, b=9, seed=1)
    parts = [dm[f"emb.cat.{n}"].values[batch.categorical[:, j]] for j, n in enumerate(schema.categorical)]
    parts += [batch.numerical[:, j:j + 1] * dm[f"emb.num.{n}"].values for j, n in enumerate(schema.numerical)]
    h = np.concatenate(parts, axis=1)
    for l in range(2):
        h = np.maximum(h @ dm[f"dnn.layer{l}.w"].values + dm[f"dnn.layer{l}.b"].values, 0)
    vanilla = h @ dm["fusion.out.w"].values[:, 0] + dm["fusion.out.b"].values[0]
    logit, _ = non_forward(batch, dm)
    checks["degenerate config == vanilla DNN (1e-10)"] = bool(np.max(np.abs(logit.values - vanilla)) <= 1e-10)
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    return ok, "4 oracle equivalences hold" if ok else f"failed: {failed}", time.perf_counter() - t0


# ---------------------------------------------------------------- 3

def criterion_3():
    t0 = time.perf_counter()
    data = synthetic.separable(1000, n_cat=5, n_num=3, seed=0)
    cfg = NONConfig(embedding_dim=8, field_wise=FieldWiseConfig((FieldGroup(1),), "none"),
                    dnn_widths=(32, 32), fusion_widths=(16,), learning_rate=0.1, batch_size=64,
                    epochs=20, patience=20, alpha=0.3)
    model = NONModel(cfg, data.schema, data.vocab_sizes, seed=0)
    rep = fit(model, data.table, data.table, seed=0, stop_when=lambda e, r: r.valid_auc[-1] >= 0.99)
    train_auc = max(rep.valid_auc)
    dt = time.perf_counter() - t0
    ok = train_auc >= 0.99 and rep.epochs_run <= 20 and dt < 60
    return ok, f"training AUC {train_auc:.4f} (>= 0.99) after {rep.epochs_run} epochs (<= 20), budget 60s", dt


# ---------------------------------------------------------------- 4 and 6

def _intra_field_run(seed, field_wise):
    data = synthetic.intra_field(seed=seed)
    train, test = split_train_valid(data.table, 0.2, seed=seed)
    train, valid = split_train_valid(train, 0.2, seed=seed + 100)
    fw = FieldWiseConfig((FieldGroup(2, (2.0,)),), "none") if field_wise else FieldWiseConfig.disabled()
    cfg = NONConfig(embedding_dim=8, field_wise=fw, operations=("dnn",), dnn_widths=(32, 32), fusion_widths=(),
                    aux_dnn=False, aux_fusion=False, learning_rate=0.05, batch_size=64, epochs=15, patience=4,
                    alpha=0.0)
    model = NONModel(cfg, data.schema, data.vocab_sizes, seed=seed)
    fit(model, train, valid, seed=seed)
    return evaluate(model, test)[0], model


@functools.lru_cache(maxsize=1)
def intra_field_experiment():
    t0 = time.perf_counter()
    plain, fw, models = [], [], []
    for s in SEEDS:
        plain.append(_intra_field_run(s, False)[0])
        a, m = _intra_field_run(s, True)
        fw.append(a)
        models.append(m)
    return plain, fw, models, time.perf_counter() - t0


def criterion_4():
    plain, fw, _, dt = intra_field_experiment()
    margin = np.mean(fw) - np.mean(plain)
    ok = margin >= 0 and dt < 600
    detail = (f"mean test AUC field-wise+DNN {np.mean(fw):.4f} vs plain DNN {np.mean(plain):.4f}, "
              f"margin {100 * margin:+.2f} points (>= 0 required, >= 0.3 expected), budget 600s")
    return ok, detail, dt


def criterion_6():
    t0 = time.perf_counter()
    _, _, models, _ = intra_field_experiment()
    reports = [field_similarity(m, sample_size=200, seed=0) for m in models]
    ok = all(r.micro_after > r.micro_before for r in reports)
    pairs = ", ".join(f"{r.micro_before:+.4f}->{r.micro_after:+.4f}" for r in reports)
    return ok, f"micro cosine before->after per seed: {pairs}", time.perf_counter() - t0


# ---------------------------------------------------------------- 5

def _deep_config(alpha, widths=(64, 64, 64, 64), lr=0.002):
    return NONConfig(embedding_dim=8, field_wise=FieldWiseConfig.disabled(), operations=("dnn",),
                     dnn_widths=widths, fusion_widths=(), learning_rate=lr, batch_size=256, epochs=20,
                     patience=20, alpha=alpha, gamma=0.0)


def criterion_5a():
    t0 = time.perf_counter()
    pairs = []
    for s in SEEDS:
        data = synthetic.separable(1000, seed=s)
        batch = next(batch_iterator(data.table, 256))
        norms = []
        for alpha in (0.0, 1.0):
            model = NONModel(_deep_config(alpha), data.schema, data.vocab_sizes, seed=s)
            with Tape() as tape:
                logit, aux = model.forward(batch, training=True)
                loss = total_loss(logit, aux, batch.labels, [], LossConfig(alpha=alpha, gamma=0.0))
            tape.backward(loss)
            norms.append(float(np.linalg.norm(model["dnn.layer0.w"].grad)))
        pairs.append(norms)
    ok = all(g1 >= g0 for g0, g1 in pairs)
    detail = "first-layer grad norm alpha=0 vs alpha=1: " + ", ".join(f"{a:.3g}/{b:.3g}" for a, b in pairs)
    return ok, detail, time.perf_counter() - t0


def _epochs_to(target, data, alpha, seed):
    model = NONModel(_deep_config(alpha), data.schema, data.vocab_sizes, seed=seed)
    rep = fit(model, data.table, data.table, seed=seed, stop_when=lambda e, r: r.valid_auc[-1] >= target)
    hit = [i + 1 for i, a in enumerate(rep.valid_auc) if a >= target]
    return hit[0] if hit else 21  # censored at the 20-epoch budget


def criterion_5b():
    t0 = time.perf_counter()
    with_aux, without = [], []
    for s in SEEDS:
        data = synthetic.separable(1000, seed=s)
        without.append(_epochs_to(0.95, data, 0.0, s))
        with_aux.append(_epochs_to(0.95, data, 0.5, s))
    m1, m0 = float(np.median(with_aux)), float(np.median(without))
    ok = m1 <= m0
    detail = f"median epochs to AUC 0.95: alpha=0.5 {m1:g} {with_aux} vs alpha=0 {m0:g} {without}"
    return ok, detail, time.perf_counter() - t0


# ---------------------------------------------------------------- 7

def criterion_7():
    t0 = time.perf_counter()
    data = synthetic.separable(1000, seed=0)
    train, test = split_train_valid(data.table, 0.2, seed=0)
    train, valid = split_train_valid(train, 0.2, seed=1)
    space = SearchSpace()
    runs = [run_search(space, data.schema, data.vocab_sizes, train, valid, test, n_trials=6, seed=2024)
            for _ in range(2)]
    a, b = runs
    identical = [r.content() for r in a.records] == [r.content() for r in b.records]
    ok_records = [r for r in a.records if r.status == "ok"]
    best_ok = a.best.valid_auc == max(r.valid_auc for r in ok_records) and a.best in ok_records
    complete = len(a.records) == 6
    dt = time.perf_counter() - t0
    ok = identical and best_ok and complete and dt < 900
    detail = (f"6 trials x2 runs, {len(ok_records)} succeeded, records identical={identical}, "
              f"best trial {a.best.trial_id} valid AUC {a.best.valid_auc:.4f} is the max={best_ok}, budget 900s")
    return ok, detail, dt


# ---------------------------------------------------------------- 8

FIXTURE = """cat,num,label
a,1.0,1
a,,0
a,3.0,1
a,5.0,0
a,,1
b,2.0,0
b,4.0,1
b,6.0,0
b,8.0,1
c,,0
"""


def criterion_8(tmp_dir: Path):
    t0 = time.perf_counter()
    checks = {}
    path = tmp_dir / "fixture.csv"
    path.write_text(FIXTURE)
    schema = DatasetSchema((FieldSpec("cat", "categorical"), FieldSpec("num", "numerical")), label="label")
    rows = read_rows(path, schema)
    vocab = build_vocabulary(rows, schema, threshold=5)
    # 'a' appears 5 times (kept), 'b' 4 and 'c' 1 (bucketed to unknown)
    checks["T=5 bucketing"] = vocab.maps["cat"] == {"a": 1} and vocab.size("cat") == 2
    stats = compute_normalization(rows, schema)
    present = np.array([1.0, 3.0, 5.0, 2.0, 4.0, 6.0, 8.0])
    checks["stats over present cells"] = (stats.mean["num"] == present.mean() and stats.std["num"] == present.std())
    table = encode_dataset(rows, schema, vocab, stats)
    checks["categorical indices"] = table.categorical[:, 0].tolist() == [1] * 5 + [UNKNOWN] * 5
    missing = [1, 4, 9]
    checks["missing numerical -> 0"] = all(table.numerical[i, 0] == 0.0 for i in missing)
    checks["z-score exact"] = table.numerical[0, 0] == (1.0 - present.mean()) / present.std()

    big = synthetic.separable(1000, seed=0).table
    train, valid = split_train_valid(big, 0.2, seed=3)
    checks["80/20 split sizes"] = (len(train), len(valid)) == (800, 200)
    t2, v2 = split_train_valid(big, 0.2, seed=3)
    checks["split deterministic"] = np.array_equal(t2.categorical, train.categorical)
    rows_seen = np.concatenate([np.concatenate([train.categorical, train.numerical], 1),
                                np.concatenate([valid.categorical, valid.numerical], 1)])
    original = np.concatenate([big.categorical, big.numerical], 1)
    checks["split is a partition"] = np.array_equal(np.unique(rows_seen, axis=0), np.unique(original, axis=0))

    sizes = [b.size for b in batch_iterator(big, 256)]
    checks["batch 256: 1000 rows -> 256,256,256,232"] = sizes == [256, 256, 256, 232]
    shuffled = np.concatenate([b.rows for b in batch_iterator(big, 256, shuffle=True, seed=1)])
    checks["shuffled epoch covers each row once"] = np.array_equal(np.sort(shuffled), np.arange(1000))
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    return ok, f"{len(checks)} exact pipeline checks" if ok else f"failed: {failed}", time.perf_counter() - t0


# ---------------------------------------------------------------- pytest entry points

def _assert(n, result):
    ok, detail, dt = result
    report(n, ok, detail, dt)
    assert ok, detail


def test_criterion_1_gradient_correctness():
    _assert("1", criterion_1())


def test_criterion_2_oracle_equivalences():
    _assert("2", criterion_2())


def test_criterion_3_overfit():
    _assert("3", criterion_3())


def test_criterion_4_intra_field_ablation():
    _assert("4", criterion_4())


def test_criterion_5a_aux_gradient_norm():
    _assert("5a", criterion_5a())


def test_criterion_5b_aux_epochs_to_target():
    _assert("5b", criterion_5b())


def test_criterion_6_cosine_direction():
    _assert("6", criterion_6())


def test_criterion_7_search_harness():
    _assert("7", criterion_7())


def test_criterion_8_data_pipeline(tmp_path):
    _assert("8", criterion_8(tmp_path))


if __name__ == "__main__":
    import tempfile
    results = []
    for n, fn in [("1", criterion_1), ("2", criterion_2), ("3", criterion_3), ("4", criterion_4),
                  ("5a", criterion_5a), ("5b", criterion_5b), ("6", criterion_6), ("7", criterion_7)]:
        results.append(fn())
        report(n, *results[-1])
    with tempfile.TemporaryDirectory() as d:
        results.append(criterion_8(Path(d)))
        report("8", *results[-1])
    sys.exit(0 if all(r[0] for r in results) else 1)
