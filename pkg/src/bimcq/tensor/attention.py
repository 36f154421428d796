"""Multi-head cross-attention with a single query row per item."""
from __future__ import annotations

import numpy as np

from .. import _kernels
from ..errors import ConfigError, ShapeError
from .core import Tensor, as_tensor, matmul


def attend(q: Tensor, k: Tensor, v: Tensor, heads: int, lengths=None) -> Tensor:
    """Per-head scaled dot-product attention of one query over ``s`` keys.

    ``q`` is ``(B, d)``; ``k``/``v`` are ``(B, s, d)``.  ``lengths`` (default
    all ``s``) masks trailing padded keys.  Heads split ``d`` into contiguous
    blocks of ``d // heads``; scores are scaled by ``1/sqrt(d // heads)``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim != 2 or k.ndim != 3 or v.shape != k.shape or k.shape[0] != q.shape[0] or k.shape[2] != q.shape[1]:
        raise ShapeError(f"attend shapes incompatible: q{q.shape} k{k.shape} v{v.shape}")
    b, s, d = k.shape
    if s < 1:
        raise ShapeError("attention needs at least one key")
    if d % heads:
        raise ConfigError("heads", f"width {d} is not divisible by {heads} heads")
    if lengths is None:
        lengths = np.full(b, s, dtype=np.int64)
    else:
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (b,) or (b and (lengths.min() < 1 or lengths.max() > s)):
            raise ShapeError(f"lengths must be {b} values in [1, {s}]")
    qd, kd, vd = q.data, k.data, v.data
    out, weights = _kernels.attention_forward(qd, kd, vd, lengths, heads)

    def back(g):
        return _kernels.attention_backward(g, qd, kd, vd, weights, lengths, heads)

    return Tensor._make(out, (q, k, v), back, "attend")


def scaled_dot_attention(q, k, v, heads: int, w_q=None, w_k=None, w_v=None, w_o=None, lengths=None) -> Tensor:
    """Project, attend and re-project.

    Accepts either one item (``q`` of shape ``(1, d)`` or ``(d,)`` with ``k``,
    ``v`` of shape ``(s, d)``; returns ``(1, d)``) or a batch (``q`` ``(B, d)``,
    ``k``/``v`` ``(B, s, d)``; returns ``(B, d)``).  A projection left as
    ``None`` is the identity.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    single = k.ndim == 2
    if single:
        q = q.reshape(1, -1) if q.ndim == 1 else q
        if q.shape[0] != 1:
            raise ShapeError(f"single-item attention takes one query row, got {q.shape}")
        k = k.reshape(1, *k.shape)
        v = v.reshape(1, *v.shape)
        if lengths is not None:
            lengths = np.atleast_1d(lengths)
    if w_q is not None:
        q = matmul(q, w_q)
    if w_k is not None:
        k = matmul(k, w_k)
    if w_v is not None:
        v = matmul(v, w_v)
    h = attend(q, k, v, heads, lengths)
    if w_o is not None:
        h = matmul(h, w_o)
    return h


def masked_mean(x: Tensor, lengths=None) -> Tensor:
    """Mean over axis 1 of ``(B, s, d)`` counting only the first ``lengths[b]`` rows."""
    x = as_tensor(x)
    b, s, _ = x.shape
    if lengths is None:
        return x.mean(axis=1)
    lengths = np.asarray(lengths, dtype=np.int64)
    mask = (np.arange(s)[None, :] < lengths[:, None]).astype(np.float64)[:, :, None]
    return (x * mask).sum(axis=1) * (1.0 / lengths.astype(np.float64))[:, None]
