"""Kernel backend selection.

The compiled extension is used when it imports; otherwise the numpy versions
take over. Set ``NETONNET_BACKEND=python`` to force the fallback.
"""
import os

from . import _pykernels

BACKEND = "python"
_impl = _pykernels

if os.environ.get("NETONNET_BACKEND", "").lower() != "python":
    try:
        from . import _kernels as _impl  # type: ignore[no-redef]

        BACKEND = "compiled"
    except ImportError:
        _impl = _pykernels


def use_backend(name):
    """Switch backend at runtime (``"compiled"`` or ``"python"``); returns the previous one."""
    global _impl, BACKEND
    previous = BACKEND
    if name == "python":
        _impl = _pykernels
    elif name == "compiled":
        from . import _kernels

        _impl = _kernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return previous


def compiled_available():
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return False
    return True


def matmul(a, b):
    return _impl.matmul(a, b)


def batched_matmul(x, w):
    return _impl.batched_matmul(x, w)


def scatter_add_rows(target, index, rows):
    _impl.scatter_add_rows(target, index, rows)


def bi_interaction(u):
    return _impl.bi_interaction(u)


def bi_interaction_grad(u, g):
    return _impl.bi_interaction_grad(u, g)
