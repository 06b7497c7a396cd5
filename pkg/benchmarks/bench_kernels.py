"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N] [--quick]

Each row reports the best-of-N wall time per call for both backends and their ratio,
plus a check that both backends agree (bit-identical for the fixed-order kernels
where the Python fallback reproduces the summation order, else max abs difference).
"""
import argparse
import timeit

import numpy as np

from netonnet import kernels, synthetic
from netonnet.config import FieldGroup, FieldWiseConfig, NONConfig
from netonnet.data import batch_iterator
from netonnet.model import NONModel
from netonnet.tensor import Tape
from netonnet.training import Adagrad, LossConfig, total_loss


def cases(quick):
    rng = np.random.default_rng(0)
    sizes = [(64, 64, 64), (256, 128, 64)] if quick else [(64, 64, 64), (256, 128, 64), (256, 512, 512)]
    for r, k, c in sizes:
        a, b = rng.normal(size=(r, k)), rng.normal(size=(k, c))
        yield f"matmul {r}x{k}x{c}", lambda a=a, b=b: kernels.matmul(a, b)
    x, w = rng.normal(size=(26, 256, 16)), rng.normal(size=(26, 16, 32))
    yield "batched_matmul 26x256x16x32", lambda: kernels.batched_matmul(x, w)
    u = rng.normal(size=(256, 26, 16))
    yield "bi_interaction 256x26x16", lambda: kernels.bi_interaction(u)
    g = rng.normal(size=(256, 16))
    yield "bi_interaction_grad 256x26x16", lambda: kernels.bi_interaction_grad(u, g)
    idx = rng.integers(0, 1000, size=256)
    rows = rng.normal(size=(256, 16))

    def scatter():
        target = np.zeros((1000, 16))
        kernels.scatter_add_rows(target, idx, rows)
        return target

    yield "scatter_add_rows 256 into 1000x16", scatter

    data = synthetic.separable(256, n_cat=8, n_num=4, seed=0)
    cfg = NONConfig(embedding_dim=16, field_wise=FieldWiseConfig((FieldGroup(2, (2.0,)),), "gate"),
                    dnn_widths=(128, 128), fusion_widths=(64,))
    batch = next(batch_iterator(data.table, 256))
    loss_cfg = LossConfig.from_config(cfg)

    def train_step():
        model = NONModel(cfg, data.schema, data.vocab_sizes, seed=0)
        opt = Adagrad(model.parameters(), lr=0.1)
        with Tape() as tape:
            logit, aux = model.forward(batch, training=True)
            loss = total_loss(logit, aux, batch.labels, model.decayed_parameters(), loss_cfg)
        tape.backward(loss)
        opt.step()
        return model.params["dnn.layer0.w"].values

    yield "full training step (b=256, m=12)", train_step


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true")
    args = ap.parse_args()
    if not kernels.compiled_available():
        print("compiled extension not built; only the python backend is available")
        return
    print(f"{'case':<36} {'compiled':>11} {'python':>11} {'py/comp':>8}  agreement")
    for name, fn in cases(args.quick):
        timings, outputs = {}, {}
        for backend in ("compiled", "python"):
            prev = kernels.use_backend(backend)
            try:
                outputs[backend] = np.array(fn())
                timer = timeit.Timer(fn)
                n, _ = timer.autorange()
                timings[backend] = min(timer.repeat(repeat=args.repeat, number=n)) / n
            finally:
                kernels.use_backend(prev)
        diff = float(np.max(np.abs(outputs["compiled"] - outputs["python"])))
        agree = "identical" if diff == 0.0 else f"max |diff| {diff:.1e}"
        print(f"{name:<36} {timings['compiled'] * 1e3:>9.3f}ms {timings['python'] * 1e3:>9.3f}ms "
              f"{timings['python'] / timings['compiled']:>8.2f}  {agree}")


if __name__ == "__main__":
    main()
