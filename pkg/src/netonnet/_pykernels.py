"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and contracts. Matmul goes through numpy (BLAS), so the
summation order is whatever BLAS picks, but it is the same for every call
with the same shapes; batched_matmul loops over slices with that same call,
which keeps stacked and per-slice results bit-identical.
"""
import numpy as np


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")
    return np.matmul(a, b)


def batched_matmul(x, w):
    if w.shape[0] != x.shape[0] or x.shape[2] != w.shape[1]:
        raise ValueError("stack or inner dimensions differ")
    out = np.empty((x.shape[0], x.shape[1], w.shape[2]), dtype=np.float64)
    for s in range(x.shape[0]):
        out[s] = np.matmul(x[s], w[s])
    return out


def scatter_add_rows(target, index, rows):
    if index.size and (index.min() < 0 or index.max() >= target.shape[0]):
        bad = index[(index < 0) | (index >= target.shape[0])][0]
        raise IndexError(f"row index {bad} out of range [0, {target.shape[0]})")
    np.add.at(target, index, rows)


def bi_interaction(u):
    s = u.sum(axis=1)
    return 0.5 * (s * s - (u * u).sum(axis=1))


def bi_interaction_grad(u, g):
    s = u.sum(axis=1, keepdims=True)
    return g[:, None, :] * (s - u)
