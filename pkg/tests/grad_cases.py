"""Random gradient-check instances for every differentiable op and both heads.

Each builder takes a Generator and returns ``(loss_fn, params)`` where
``loss_fn()`` is a scalar contraction of the op output with fixed weights.
"""
import numpy as np

from bimcq.data import DiseaseVocab
from bimcq.model import BiMcqModel, ModelConfig
from bimcq.prompts import PromptSpec, Tokenizer
from bimcq.tensor import (
    Tensor, add, attend, concat, cross_entropy, div, exp, getitem, l2_normalize, log, log_softmax,
    masked_mean, matmul, mean, mul, reshape, scaled_dot_attention, sigmoid, softmax, sqrt, stack, sub,
    sum_, take, tanh, transpose,
)


def leaf(rng, *shape, low=-2.0, high=2.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def contract(out, rng):
    w = Tensor(rng.normal(size=out.shape))
    return lambda t: sum_(mul(t, w))


def unary(op, low=-2.0, high=2.0):
    def build(rng):
        x = leaf(rng, 3, 4, low=low, high=high)
        c = contract(op(x), rng)
        return (lambda: c(op(x))), [x]
    return build


def binary(op, b_low=-2.0, b_high=2.0, b_shape=(3, 4)):
    def build(rng):
        a = leaf(rng, 3, 4)
        b = leaf(rng, *b_shape, low=b_low, high=b_high)
        c = contract(op(a, b), rng)
        return (lambda: c(op(a, b))), [a, b]
    return build


def _matmul(rng):
    a, b = leaf(rng, 3, 4), leaf(rng, 4, 2)
    c = contract(matmul(a, b), rng)
    return (lambda: c(matmul(a, b))), [a, b]


def _batched_matmul(rng):
    a, b = leaf(rng, 2, 3, 4), leaf(rng, 4, 5)
    c = contract(matmul(a, b), rng)
    return (lambda: c(matmul(a, b))), [a, b]


def _reduce(op, axis):
    def build(rng):
        x = leaf(rng, 3, 4)
        c = contract(op(x, axis=axis), rng)
        return (lambda: c(op(x, axis=axis))), [x]
    return build


def _reshape(rng):
    x = leaf(rng, 3, 4)
    c = contract(reshape(x, (2, 6)), rng)
    return (lambda: c(reshape(x, (2, 6)))), [x]


def _transpose(rng):
    x = leaf(rng, 2, 3, 4)
    c = contract(transpose(x, (2, 0, 1)), rng)
    return (lambda: c(transpose(x, (2, 0, 1)))), [x]


def _getitem(rng):
    x = leaf(rng, 4, 5)
    idx = (np.array([0, 2, 2, 3]), np.array([1, 1, 1, 4]))
    c = contract(getitem(x, idx), rng)
    return (lambda: c(getitem(x, idx))), [x]


def _take(rng):
    x = leaf(rng, 5, 3)
    idx = np.array([[0, 4], [2, 2], [1, 0]])
    c = contract(take(x, idx, axis=0), rng)
    return (lambda: c(take(x, idx, axis=0))), [x]


def _concat(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 4, 3)
    c = contract(concat([a, b], axis=0), rng)
    return (lambda: c(concat([a, b], axis=0))), [a, b]


def _stack(rng):
    a, b = leaf(rng, 2, 3), leaf(rng, 2, 3)
    c = contract(stack([a, b], axis=1), rng)
    return (lambda: c(stack([a, b], axis=1))), [a, b]


def _log_softmax_masked(rng):
    x = leaf(rng, 3, 5)
    mask = np.ones((3, 5), dtype=bool)
    mask[0, 3:] = False
    mask[2, 1] = False
    keep = np.nonzero(mask)
    w = Tensor(rng.normal(size=len(keep[0])))
    return (lambda: sum_(mul(getitem(log_softmax(x, axis=-1, mask=mask), keep), w))), [x]


def _ce_single(rng):
    x = leaf(rng, 5)
    t = int(rng.integers(5))
    return (lambda: cross_entropy(x, t)), [x]


def _ce_rows(rng):
    x = leaf(rng, 4, 3)
    t = rng.integers(3, size=4)
    return (lambda: cross_entropy(x, t)), [x]


def _ce_masked(rng):
    x = leaf(rng, 3, 4)
    mask = np.array([[1, 1, 0, 0], [1, 1, 1, 1], [1, 1, 1, 0]], dtype=bool)
    t = np.array([1, 3, 0])
    return (lambda: cross_entropy(x, t, mask=mask)), [x]


def _attend(rng):
    q, k, v = leaf(rng, 3, 8), leaf(rng, 3, 4, 8), leaf(rng, 3, 4, 8)
    lengths = np.array([4, 2, 1])
    c = contract(attend(q, k, v, 2, lengths), rng)
    return (lambda: c(attend(q, k, v, 2, lengths))), [q, k, v]


def _scaled_dot_attention(rng):
    q, k, v = leaf(rng, 1, 8), leaf(rng, 3, 8), leaf(rng, 3, 8)
    ws = [Tensor(rng.normal(0, 0.5, size=(8, 8)), requires_grad=True) for _ in range(4)]
    fn = lambda: scaled_dot_attention(q, k, v, 2, *ws)
    c = contract(fn(), rng)
    return (lambda: c(fn())), [q, k, v, *ws]


def _masked_mean(rng):
    x = leaf(rng, 3, 4, 2)
    lengths = np.array([4, 1, 3])
    c = contract(masked_mean(x, lengths), rng)
    return (lambda: c(masked_mean(x, lengths))), [x]


OP_CASES = {
    "add": binary(add),
    "add_broadcast": binary(add, b_shape=(4,)),
    "sub": binary(sub),
    "mul": binary(mul),
    "mul_broadcast": binary(mul, b_shape=(3, 1)),
    "div": binary(div, b_low=0.5, b_high=2.0),
    "exp": unary(exp),
    "log": unary(log, 0.2, 2.0),
    "sqrt": unary(sqrt, 0.2, 2.0),
    "tanh": unary(tanh),
    "sigmoid": unary(sigmoid),
    "neg": unary(lambda x: -x),
    "sum_axis": _reduce(sum_, 1),
    "sum_all": _reduce(sum_, None),
    "mean_axis": _reduce(mean, 0),
    "reshape": _reshape,
    "transpose": _transpose,
    "getitem": _getitem,
    "take": _take,
    "concat": _concat,
    "stack": _stack,
    "matmul": _matmul,
    "matmul_batched": _batched_matmul,
    "softmax": unary(lambda x: softmax(x, axis=-1)),
    "log_softmax": unary(lambda x: log_softmax(x, axis=0)),
    "log_softmax_masked": _log_softmax_masked,
    "cross_entropy": _ce_single,
    "cross_entropy_rows": _ce_rows,
    "cross_entropy_masked": _ce_masked,
    "l2_normalize": unary(lambda x: l2_normalize(x, axis=-1)),
    "attend": _attend,
    "scaled_dot_attention": _scaled_dot_attention,
    "masked_mean": _masked_mean,
}


def tiny_model(seed, fusion_mode="Separated"):
    vocab = DiseaseVocab.default(3)
    model = BiMcqModel(ModelConfig(d=8, heads=2, fusion_mode=fusion_mode, max_tokens=16), d_raw=5, vocab_size=len(Tokenizer(vocab)), seed=seed)
    return model, Tokenizer(vocab)


def _head_case(direction):
    def build(rng):
        seed = int(rng.integers(2**31))
        model, tok = tiny_model(seed)
        patches = rng.uniform(-2, 2, size=(2, 4, 5))
        specs = [PromptSpec([0]), PromptSpec(negated=[0]), PromptSpec([1], [2])]
        seqs = [tok.encode(s) for s in specs]
        target = int(rng.integers(2))

        def loss():
            images = model.encode_images(patches)
            texts = model.encode_texts(seqs)
            if direction == "i2t":
                logits = model.i2t_pairs(images, texts, [0, 0], [target, 1 - target])
            else:
                logits = model.t2i_pairs(texts, images, [2, 2], [0, 1])
            return cross_entropy(logits, 0)

        # the other direction's head is not an input to this forward
        head = model.i2t_head if direction == "i2t" else model.t2i_head
        used = [*model.image_encoder.named_parameters().values(), *model.text_encoder.named_parameters().values(),
                *head.named_parameters().values()]
        return loss, used
    return build


MODEL_CASES = {"i2t_forward": _head_case("i2t"), "t2i_forward": _head_case("t2i")}
