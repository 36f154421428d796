"""Pure numpy multi-head single-query attention kernels.

Shapes: ``q`` is ``(B, d)``, ``k`` and ``v`` are ``(B, s, d)``, ``lengths`` is
``(B,)`` and marks how many leading key rows of each item are valid.  Keys past
``lengths[b]`` receive zero attention weight.
"""
from __future__ import annotations

import numpy as np


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    # (B, s, d) -> (B, H, s, dh)
    b, s, d = x.shape
    return x.reshape(b, s, heads, d // heads).transpose(0, 2, 1, 3)


def attention_forward(q, k, v, lengths, heads):
    b, s, d = k.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.reshape(b, heads, dh)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    scores = np.einsum("bhd,bhsd->bhs", qh, kh) * scale
    valid = np.arange(s)[None, :] < lengths[:, None]
    scores = np.where(valid[:, None, :], scores, -np.inf)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    out = np.einsum("bhs,bhsd->bhd", w, vh).reshape(b, d)
    return out, w


def attention_backward(grad_out, q, k, v, attn, lengths, heads):
    b, s, d = k.shape
    dh = d // heads
    scale = 1.0 / np.sqrt(dh)
    qh = q.reshape(b, heads, dh)
    kh = _split_heads(k, heads)
    vh = _split_heads(v, heads)
    go = grad_out.reshape(b, heads, dh)

    gvh = attn[..., None] * go[:, :, None, :]
    gw = np.einsum("bhd,bhsd->bhs", go, vh)
    gs = attn * (gw - (attn * gw).sum(axis=-1, keepdims=True))
    gqh = np.einsum("bhs,bhsd->bhd", gs, kh) * scale
    gkh = gs[..., None] * qh[:, :, None, :] * scale

    gq = gqh.reshape(b, d)
    gk = gkh.transpose(0, 2, 1, 3).reshape(b, s, d)
    gv = gvh.transpose(0, 2, 1, 3).reshape(b, s, d)
    return gq, gk, gv
