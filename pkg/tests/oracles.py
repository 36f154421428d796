"""Independent reference implementations used by the tests.

Nothing here imports package internals beyond plain data containers.
"""
import math

import numpy as np


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


def counts(pred, labels):
    tp = sum(1 for p, y in zip(pred, labels) if p and y)
    tn = sum(1 for p, y in zip(pred, labels) if not p and not y)
    fp = sum(1 for p, y in zip(pred, labels) if p and not y)
    fn = sum(1 for p, y in zip(pred, labels) if not p and y)
    return tp, tn, fp, fn


def mcc_formula(tp, tn, fp, fn):
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    return 0.0 if den == 0 else (tp * tn - fp * fn) / math.sqrt(den)


def softmax_rows(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def attention_single(q, k, v, heads, w_q=None, w_k=None, w_v=None, w_o=None):
    """Straight-line multi-head attention for one query row ``q`` (d,) over ``k``/``v`` (s, d)."""
    q = q if w_q is None else q @ w_q
    k = k if w_k is None else k @ w_k
    v = v if w_v is None else v @ w_v
    d = q.shape[-1]
    dh = d // heads
    out = np.zeros(d)
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        scores = np.array([np.dot(q[sl], k[j, sl]) for j in range(k.shape[0])]) / math.sqrt(dh)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        out[sl] = sum(w[j] * v[j, sl] for j in range(k.shape[0]))
    return out if w_o is None else out @ w_o


def consistent(affirmed, negated, labels):
    return all(labels[a] for a in affirmed) and not any(labels[n] for n in negated)


def check_i2t(inst, labels):
    """Brute-force scan: exactly one candidate consistent, located at ``correct``, all distinct."""
    hits = [i for i, c in enumerate(inst.candidates) if consistent(c.affirmed, c.negated, labels)]
    distinct = len({(tuple(sorted(c.affirmed)), tuple(sorted(c.negated))) for c in inst.candidates}) == len(inst.candidates)
    return hits == [inst.correct] and distinct


def check_t2i(inst, batch_labels):
    p = inst.query_prompt
    hits = [i for i, j in enumerate(inst.options) if consistent(p.affirmed, p.negated, batch_labels[j])]
    return hits == [inst.correct] and inst.options[inst.correct] == inst.source_image_index
