"""Toy encoders and direction-specific cross-attention fusion heads.

Image encoder: per-patch affine map ``d_raw -> d`` followed by ``tanh``; the
global embedding is the mean over patch rows.  Text encoder: learned token
plus positional embeddings; the global embedding is the mean over token rows.

A fusion head scores one (query, key-set) pair: the query's global embedding
attends over ``[global ; locals]`` of the other modality, and a two-layer MLP
maps the attended vector to a scalar logit.
"""
from __future__ import annotations

import enum
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .prompts import TokenSequence, pad_batch
from .seeding import substream
from .tensor import Tensor, attend, concat, masked_mean, matmul, take, tanh
from .tensor.core import as_tensor, reshape


class Freeze(str, enum.Enum):
    NONE = "None"
    IMAGE = "Image"
    IMAGE_AND_TEXT = "ImageAndText"


class FusionMode(str, enum.Enum):
    SEPARATED = "Separated"
    SHARED = "Shared"


@dataclass
class ModelConfig:
    d: int = 64
    heads: int = 4
    mlp_hidden: int | None = None
    freeze: Freeze = Freeze.NONE
    fusion_mode: FusionMode = FusionMode.SEPARATED
    max_tokens: int | None = None

    def __post_init__(self):
        self.freeze = Freeze(self.freeze)
        self.fusion_mode = FusionMode(self.fusion_mode)

    def validate(self) -> "ModelConfig":
        if self.d < 1:
            raise ConfigError("d", "must be >= 1")
        if self.heads < 1 or self.d % self.heads:
            raise ConfigError("heads", f"d={self.d} must be divisible by heads={self.heads}")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ConfigError("mlp_hidden", "must be >= 1")
        return self


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    std = np.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, std, size=shape or (fan_in, fan_out))


class Module:
    """Collects ``Tensor`` attributes and sub-modules as named parameters."""

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(prefix + name + "."))
        return out

    def set_trainable(self, flag: bool) -> None:
        for p in self.named_parameters().values():
            p.requires_grad = flag
            if not flag:
                p.grad = None


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator):
        self.weight = Tensor(glorot(rng, fan_in, fan_out), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x):
        return matmul(x, self.weight) + self.bias


@dataclass
class EncoderOutputs:
    """Global and local embeddings, batched.

    ``global_`` is ``(B, d)``; ``local`` is ``(B, s, d)`` and ``lengths`` gives
    the number of valid local rows per item (text is right-padded).
    """

    global_: Tensor
    local: Tensor
    lengths: np.ndarray

    def __len__(self) -> int:
        return self.global_.shape[0]

    def key_rows(self) -> tuple[Tensor, np.ndarray]:
        """``[global ; locals]`` as ``(B, 1 + s, d)`` and the matching valid lengths."""
        b, _, d = self.local.shape
        kv = concat([reshape(self.global_, (b, 1, d)), self.local], axis=1)
        return kv, self.lengths + 1

    def item(self, i: int) -> "EncoderOutputs":
        n = int(self.lengths[i])
        return EncoderOutputs(self.global_[i : i + 1], self.local[i : i + 1, :n], self.lengths[i : i + 1])


class ImageEncoder(Module):
    def __init__(self, d_raw: int, d: int, rng: np.random.Generator):
        self.d_raw = d_raw
        self.proj = Linear(d_raw, d, rng)

    def __call__(self, patches) -> EncoderOutputs:
        patches = as_tensor(patches)
        if patches.ndim == 2:
            patches = reshape(patches, (1, *patches.shape))
        if patches.ndim != 3 or patches.shape[-1] != self.d_raw:
            raise ConfigError("d_raw", f"expected patch width {self.d_raw}, got input of shape {patches.shape}")
        local = tanh(self.proj(patches))
        b, p, _ = local.shape
        return EncoderOutputs(local.mean(axis=1), local, np.full(b, p, dtype=np.int64))


class TextEncoder(Module):
    def __init__(self, vocab_size: int, max_tokens: int, d: int, rng: np.random.Generator):
        scale = 1.0 / np.sqrt(d)
        self.vocab_size = vocab_size
        self.max_tokens = max_tokens
        self.token_embedding = Tensor(rng.normal(0.0, scale, size=(vocab_size, d)), requires_grad=True)
        self.position_embedding = Tensor(rng.normal(0.0, scale, size=(max_tokens, d)), requires_grad=True)

    def __call__(self, seqs) -> EncoderOutputs:
        if isinstance(seqs, TokenSequence):
            seqs = [seqs]
        ids, lengths = pad_batch(seqs)
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            raise IndexError(f"token id outside embedding table of size {self.vocab_size}")
        if ids.shape[1] > self.max_tokens:
            raise ShapeError(f"prompt of {ids.shape[1]} tokens exceeds max_tokens={self.max_tokens}")
        tok = take(self.token_embedding, ids, axis=0)
        pos = self.position_embedding[: ids.shape[1]]
        local = tok + pos
        return EncoderOutputs(masked_mean(local, lengths), local, lengths)


class FusionHead(Module):
    """Cross-attention (query/key/value/output projections) followed by an MLP."""

    def __init__(self, d: int, heads: int, hidden: int, rng: np.random.Generator):
        self.heads = heads
        self.w_q = Tensor(glorot(rng, d, d), requires_grad=True)
        self.w_k = Tensor(glorot(rng, d, d), requires_grad=True)
        self.w_v = Tensor(glorot(rng, d, d), requires_grad=True)
        self.w_o = Tensor(glorot(rng, d, d), requires_grad=True)
        self.mlp_in = Linear(d, hidden, rng)
        self.mlp_out = Linear(hidden, 1, rng)

    def project_keys(self, kv: Tensor) -> tuple[Tensor, Tensor]:
        return matmul(kv, self.w_k), matmul(kv, self.w_v)

    def hidden(self, query: Tensor, keys: Tensor, values: Tensor, lengths) -> Tensor:
        """Attended representation ``h`` for already-projected keys and values."""
        return matmul(attend(matmul(query, self.w_q), keys, values, self.heads, lengths), self.w_o)

    def mlp(self, h: Tensor) -> Tensor:
        out = self.mlp_out(tanh(self.mlp_in(h)))
        return reshape(out, (out.shape[0],))

    def __call__(self, query: Tensor, kv: Tensor, lengths) -> Tensor:
        k, v = self.project_keys(kv)
        return self.mlp(self.hidden(query, k, v, lengths))


class BiMcqModel(Module):
    def __init__(self, cfg: ModelConfig, d_raw: int, vocab_size: int, seed: int):
        cfg.validate()
        self.config = cfg
        rng = substream(seed, "init")
        max_tokens = cfg.max_tokens or 64
        hidden = cfg.mlp_hidden or cfg.d
        self.image_encoder = ImageEncoder(d_raw, cfg.d, rng)
        self.text_encoder = TextEncoder(vocab_size, max_tokens, cfg.d, rng)
        self.i2t_head = FusionHead(cfg.d, cfg.heads, hidden, rng)
        if cfg.fusion_mode is FusionMode.SHARED:
            self.t2i_head = self.i2t_head
        else:
            self.t2i_head = FusionHead(cfg.d, cfg.heads, hidden, rng)
        apply_freeze(self, cfg.freeze)

    def named_parameters(self, prefix: str = "") -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        seen: set[int] = set()
        for name, p in super().named_parameters(prefix).items():
            if id(p) not in seen:
                seen.add(id(p))
                out[name] = p
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return [p for p in self.named_parameters().values() if p.requires_grad]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state) -> None:
        params = self.named_parameters()
        if list(params) != list(state):
            raise ConfigError("parameters", f"parameter names differ: {list(params)} vs {list(state)}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ConfigError("parameters", f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    # -- encoding ---------------------------------------------------------
    def encode_images(self, patches) -> EncoderOutputs:
        return self.image_encoder(patches)

    def encode_texts(self, seqs) -> EncoderOutputs:
        return self.text_encoder(seqs)

    # -- pairwise scoring -------------------------------------------------
    def i2t_pairs(self, images: EncoderOutputs, texts: EncoderOutputs, image_idx, text_idx, return_hidden: bool = False):
        """Logits for (image_idx[n], text_idx[n]) pairs: image queries over text keys."""
        return _pair_scores(self.i2t_head, images.global_, texts, image_idx, text_idx, return_hidden)

    def t2i_pairs(self, texts: EncoderOutputs, images: EncoderOutputs, text_idx, image_idx, return_hidden: bool = False):
        """Logits for (text_idx[n], image_idx[n]) pairs: text queries over image keys."""
        return _pair_scores(self.t2i_head, texts.global_, images, text_idx, image_idx, return_hidden)


def _pair_scores(head: FusionHead, query_global: Tensor, keyside: EncoderOutputs, q_idx, k_idx, return_hidden):
    q_idx = np.asarray(q_idx, dtype=np.int64)
    k_idx = np.asarray(k_idx, dtype=np.int64)
    kv, lengths = keyside.key_rows()
    keys, values = head.project_keys(kv)
    h = head.hidden(take(query_global, q_idx), take(keys, k_idx), take(values, k_idx), lengths[k_idx])
    logits = head.mlp(h)
    return (logits, h) if return_hidden else logits


def apply_freeze(model: BiMcqModel, mode) -> None:
    """Exclude encoder parameters from gradient updates per ``mode``; heads stay trainable."""
    mode = Freeze(mode)
    model.config.freeze = mode
    model.image_encoder.set_trainable(mode is Freeze.NONE)
    model.text_encoder.set_trainable(mode is not Freeze.IMAGE_AND_TEXT)
    model.i2t_head.set_trainable(True)
    model.t2i_head.set_trainable(True)


def _stack_single(outputs: list[EncoderOutputs]) -> EncoderOutputs:
    """Batch single-item encoder outputs, zero-padding local rows to a common length."""
    lengths = np.array([int(o.lengths[0]) for o in outputs], dtype=np.int64)
    s_max = int(lengths.max())
    rows = []
    for o in outputs:
        loc = o.local
        if loc.ndim == 2:
            loc = reshape(loc, (1, *loc.shape))
        pad = s_max - loc.shape[1]
        if pad:
            loc = concat([loc, Tensor(np.zeros((1, pad, loc.shape[2])))], axis=1)
        rows.append(loc)
    glob = concat([reshape(o.global_, (1, -1)) for o in outputs], axis=0)
    return EncoderOutputs(glob, concat(rows, axis=0), lengths)


def i2t_logits(query: EncoderOutputs, candidates: list[EncoderOutputs], head: FusionHead) -> Tensor:
    """Score each candidate prompt against one query image independently; returns ``(N,)``."""
    return _single_query_logits(query, candidates, head)


def t2i_logits(query: EncoderOutputs, options: list[EncoderOutputs], head: FusionHead) -> Tensor:
    """Score each option image against one query prompt independently; returns ``(M,)``."""
    return _single_query_logits(query, options, head)


def _single_query_logits(query: EncoderOutputs, others: list[EncoderOutputs], head: FusionHead) -> Tensor:
    if not others:
        raise ShapeError("need at least one candidate")
    widths = {query.global_.shape[-1]} | {o.global_.shape[-1] for o in others}
    if len(widths) != 1:
        raise ConfigError("d", f"embedding widths differ: {sorted(widths)}")
    keyside = _stack_single(others)
    q = reshape(query.global_, (1, -1))
    n = len(others)
    return _pair_scores(head, q, keyside, np.zeros(n, dtype=np.int64), np.arange(n), False)
