"""Attention kernels with a compiled fast path.

The Cython extension is used when it was built at install time; otherwise the
numpy implementation is used.  Setting ``BIMCQ_KERNELS=python`` forces the
numpy path even when the extension is available.
"""
from __future__ import annotations

import os

import numpy as np

from . import _attention_py

try:
    from . import _attention_ext
except ImportError:  # extension not built
    _attention_ext = None

BACKENDS = {"python": _attention_py}
if _attention_ext is not None:
    BACKENDS["cython"] = _attention_ext

_requested = os.environ.get("BIMCQ_KERNELS", "").strip().lower()
if _requested and _requested not in ("python", "cython"):
    raise ImportError(f"BIMCQ_KERNELS must be 'python' or 'cython', got {_requested!r}")
if _requested == "cython" and _attention_ext is None:
    raise ImportError("BIMCQ_KERNELS=cython but the compiled extension is not available")

BACKEND = _requested or ("cython" if _attention_ext is not None else "python")
_impl = BACKENDS[BACKEND]


def _prep(q, k, v, lengths):
    q = np.ascontiguousarray(q, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    lengths = np.ascontiguousarray(lengths, dtype=np.int64)
    return q, k, v, lengths


def attention_forward(q, k, v, lengths, heads, backend=None):
    """Return ``(out, weights)`` for masked multi-head single-query attention."""
    impl = BACKENDS[backend] if backend else _impl
    q, k, v, lengths = _prep(q, k, v, lengths)
    return impl.attention_forward(q, k, v, lengths, int(heads))


def attention_backward(grad_out, q, k, v, weights, lengths, heads, backend=None):
    """Return ``(grad_q, grad_k, grad_v)`` given the upstream gradient of ``out``."""
    impl = BACKENDS[backend] if backend else _impl
    q, k, v, lengths = _prep(q, k, v, lengths)
    grad_out = np.ascontiguousarray(grad_out, dtype=np.float64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    return impl.attention_backward(grad_out, q, k, v, weights, lengths, int(heads))
