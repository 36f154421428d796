"""Bi-MCQ and InfoNCE objectives, the training loop and checkpoint files."""
from __future__ import annotations

import enum
import hashlib
import json
import logging
import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import _serde
from .data import Dataset, DiseaseVocab
from .errors import ConfigError, IntegrityError, NumericError, TrainingError
from .mcq import BuildStats, McqConfig, build_i2t, build_t2i
from .model import BiMcqModel, EncoderOutputs, ModelConfig
from .prompts import PromptSpec, Tokenizer
from .seeding import substream
from .tensor import Adam, Tensor, concat, cross_entropy, l2_normalize, log_softmax, matmul, take
from .tensor.core import reshape, transpose

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BIMCQCKP"
CHECKPOINT_VERSION = 1
_DIGEST_BYTES = 32
INFONCE_PROMPT_STYLES = ("per_disease", "joint")


class Objective(str, enum.Enum):
    BIMCQ = "BiMcq"
    INFONCE_POS_ONLY = "InfoNcePosOnly"
    INFONCE_POS_NEG = "InfoNcePosNeg"

    @property
    def is_infonce(self) -> bool:
        return self is not Objective.BIMCQ


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 1e-5
    seed: int = 0
    objective: Objective = Objective.BIMCQ
    temperature: float = 0.07
    infonce_prompts: str = "per_disease"
    mcq: McqConfig = field(default_factory=McqConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        self.objective = Objective(self.objective)

    def validate(self, n_diseases: int | None = None) -> "TrainConfig":
        if self.epochs < 0:
            raise ConfigError("train.epochs", "must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("train.batch_size", "must be >= 2 (text-to-image items need distractors)")
        if not self.learning_rate > 0:
            raise ConfigError("train.learning_rate", "must be > 0")
        if not self.temperature > 0:
            raise ConfigError("train.temperature", "must be > 0")
        if self.infonce_prompts not in INFONCE_PROMPT_STYLES:
            raise ConfigError("train.infonce_prompts", f"must be one of {INFONCE_PROMPT_STYLES}")
        if self.seed < 0:
            raise ConfigError("train.seed", "must be >= 0")
        for prefix, check in (("train.mcq.", lambda: self.mcq.validate(n_diseases)), ("train.model.", self.model.validate)):
            try:
                check()
            except ConfigError as exc:
                raise ConfigError(prefix + exc.field, str(exc).split(": ", 1)[-1]) from None
        return self

    def to_dict(self) -> dict:
        return _serde.to_dict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return _serde.from_dict(cls, data, "train.")


# -- losses ---------------------------------------------------------------------
def bimcq_loss(i2t: Sequence[tuple[Tensor, int]], t2i: Sequence[tuple[Tensor, int]]) -> Tensor:
    """Mean I2T cross-entropy plus mean T2I cross-entropy; an empty direction contributes 0."""
    terms = []
    for items in (i2t, t2i):
        if not items:
            continue
        total = None
        for logits, target in items:
            ce = cross_entropy(logits, target)
            total = ce if total is None else total + ce
        terms.append(total * (1.0 / len(items)))
    if not terms:
        return Tensor(0.0)
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def padded_cross_entropy(flat_logits: Tensor, segments: Sequence[Sequence[int]], targets) -> Tensor:
    """Mean cross-entropy over variable-length groups of ``flat_logits``.

    ``segments[r]`` lists the flat positions forming row ``r``; ``targets[r]``
    indexes into that row.
    """
    width = max(len(s) for s in segments)
    index = np.zeros((len(segments), width), dtype=np.int64)
    mask = np.zeros((len(segments), width), dtype=bool)
    for r, seg in enumerate(segments):
        index[r, : len(seg)] = seg
        mask[r, : len(seg)] = True
    rows = take(flat_logits, index, axis=0)
    return cross_entropy(rows, np.asarray(targets, dtype=np.int64), mask=None if mask.all() else mask)


def infonce_from_targets(image_global: Tensor, text_global: Tensor, positives, temperature: float) -> Tensor:
    """Symmetric InfoNCE on cosine similarity with a boolean positive mask.

    ``positives[i, t]`` marks text ``t`` as describing image ``i``.  Each
    row's (and each column's) target spreads its mass evenly over its
    positives, so one-to-one pairs reduce to the usual CLIP objective.
    """
    positives = np.asarray(positives, dtype=bool)
    n_img, n_txt = image_global.shape[0], text_global.shape[0]
    if positives.shape != (n_img, n_txt):
        raise ValueError(f"positive mask {positives.shape} does not match ({n_img}, {n_txt})")
    if n_img < 2 or n_txt < 2:
        raise ValueError("InfoNCE needs at least two pairs")
    if not temperature > 0:
        raise ValueError("temperature must be > 0")
    if not (positives.any(axis=1).all() and positives.any(axis=0).all()):
        raise ValueError("every image and every text needs at least one positive")
    zi = l2_normalize(image_global, axis=-1)
    zt = l2_normalize(text_global, axis=-1)
    sim = matmul(zi, transpose(zt)) * (1.0 / temperature)
    row_t = positives / positives.sum(axis=1, keepdims=True)
    col_t = positives / positives.sum(axis=0, keepdims=True)
    loss_i2t = -(log_softmax(sim, axis=1) * row_t).sum() * (1.0 / n_img)
    loss_t2i = -(log_softmax(sim, axis=0) * col_t).sum() * (1.0 / n_txt)
    return (loss_i2t + loss_t2i) * 0.5


def infonce_from_globals(image_global: Tensor, text_global: Tensor, owner, temperature: float) -> Tensor:
    """InfoNCE where ``owner[t]`` is the single image row that text ``t`` describes."""
    owner = np.asarray(owner, dtype=np.int64)
    positives = np.zeros((image_global.shape[0], text_global.shape[0]), dtype=bool)
    positives[owner, np.arange(len(owner))] = True
    return infonce_from_targets(image_global, text_global, positives, temperature)


def infonce_loss(pairs: Sequence[tuple[EncoderOutputs, EncoderOutputs]], temperature: float, owners=None) -> Tensor:
    """Symmetric InfoNCE over (image, prompt) pairs using global embeddings.

    By default every pair has its own image.  ``owners`` groups pairs that
    share one image: such pairs contribute their prompts as joint positives.
    """
    if len(pairs) < 2:
        raise ValueError("InfoNCE needs at least two pairs")
    owners = np.arange(len(pairs)) if owners is None else np.asarray(owners, dtype=np.int64)
    _, first, inverse = np.unique(owners, return_index=True, return_inverse=True)
    img = concat([reshape(pairs[i][0].global_, (1, -1)) for i in first], axis=0)
    txt = concat([reshape(p[1].global_, (1, -1)) for p in pairs], axis=0)
    return infonce_from_globals(img, txt, inverse, temperature)


# -- prompt caching ---------------------------------------------------------------
class PromptCache:
    def __init__(self, tokenizer: Tokenizer):
        self.tokenizer = tokenizer
        self._seqs: dict[PromptSpec, object] = {}

    def __call__(self, spec: PromptSpec):
        seq = self._seqs.get(spec)
        if seq is None:
            seq = self._seqs[spec] = self.tokenizer.encode(spec)
        return seq


def _index_specs(specs) -> tuple[list[PromptSpec], dict[PromptSpec, int]]:
    order: dict[PromptSpec, int] = {}
    for s in specs:
        if s not in order:
            order[s] = len(order)
    return list(order), order


def bimcq_batch_loss(model: BiMcqModel, prompts: PromptCache, patches: np.ndarray, labels: np.ndarray,
                     mcq: McqConfig, rng: np.random.Generator, stats: BuildStats | None = None) -> Tensor:
    i2t = build_i2t(labels, mcq, rng, stats)
    t2i = build_t2i(labels, mcq, rng, stats)
    specs, where = _index_specs([c for inst in i2t for c in inst.candidates] + [inst.query_prompt for inst in t2i])
    images = model.encode_images(patches)
    texts = model.encode_texts([prompts(s) for s in specs])

    img_idx, txt_idx, segments, targets = [], [], [], []
    for inst in i2t:
        start = len(img_idx)
        for c in inst.candidates:
            img_idx.append(inst.query_image_index)
            txt_idx.append(where[c])
        segments.append(range(start, len(img_idx)))
        targets.append(inst.correct)
    loss = padded_cross_entropy(model.i2t_pairs(images, texts, img_idx, txt_idx), segments, targets)

    if t2i:
        q_idx, o_idx, segments, targets = [], [], [], []
        for inst in t2i:
            start = len(q_idx)
            q = where[inst.query_prompt]
            for o in inst.options:
                q_idx.append(q)
                o_idx.append(o)
            segments.append(range(start, len(q_idx)))
            targets.append(inst.correct)
        loss = loss + padded_cross_entropy(model.t2i_pairs(texts, images, q_idx, o_idx), segments, targets)
    return loss


def infonce_prompts(labels: np.ndarray, objective: Objective, style: str = "per_disease") -> tuple[list[int], list[PromptSpec]]:
    """(owner image, prompt) lists for the InfoNCE baselines.

    ``per_disease`` gives each image one ``there is c .`` prompt per present
    finding (Pos-Neg adds ``there is no c .`` per absent disease), all of them
    joint positives.  ``joint`` gives one prompt naming every present finding
    (and for Pos-Neg one naming every absent disease).  Images without a
    finding have no affirmative prompt and are skipped by Pos-Only.
    """
    if style not in INFONCE_PROMPT_STYLES:
        raise ConfigError("train.infonce_prompts", f"must be one of {INFONCE_PROMPT_STYLES}")
    owners, specs = [], []
    for i, row in enumerate(np.asarray(labels, dtype=bool)):
        present = np.flatnonzero(row).tolist()
        absent = np.flatnonzero(~row).tolist() if objective is Objective.INFONCE_POS_NEG else []
        if style == "joint":
            groups = [PromptSpec(affirmed=present)] if present else []
            groups += [PromptSpec(negated=absent)] if absent else []
        else:
            groups = [PromptSpec(affirmed=[c]) for c in present] + [PromptSpec(negated=[c]) for c in absent]
        owners += [i] * len(groups)
        specs += groups
    return owners, specs


def infonce_batch_loss(model: BiMcqModel, prompts: PromptCache, patches: np.ndarray, labels: np.ndarray,
                       objective: Objective, temperature: float, style: str = "per_disease") -> Tensor | None:
    owners, specs = infonce_prompts(labels, objective, style)
    used = sorted(set(owners))
    unique, where = _index_specs(specs)
    if len(used) < 2 or len(unique) < 2:
        return None
    remap = {img: r for r, img in enumerate(used)}
    positives = np.zeros((len(used), len(unique)), dtype=bool)
    for o, s in zip(owners, specs):
        positives[remap[o], where[s]] = True
    images = model.encode_images(patches[used])
    texts = model.encode_texts([prompts(s) for s in unique])
    return infonce_from_targets(images.global_, texts.global_, positives, temperature)


# -- checkpoints -------------------------------------------------------------------
@dataclass
class Checkpoint:
    params: "OrderedDict[str, np.ndarray]"
    vocab: list[str]
    train_config: dict
    d_raw: int
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    rng_state: dict = field(default_factory=dict)
    build_stats: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    @property
    def config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.train_config)

    @property
    def disease_vocab(self) -> DiseaseVocab:
        return DiseaseVocab(tuple(self.vocab))

    def tokenizer(self) -> Tokenizer:
        return Tokenizer(self.disease_vocab)

    def build_model(self) -> BiMcqModel:
        cfg = self.config
        model = BiMcqModel(cfg.model, self.d_raw, len(self.tokenizer()), cfg.seed)
        model.load_state_dict(self.params)
        return model

    def meta(self) -> dict:
        return {
            "vocab": list(self.vocab),
            "train_config": self.train_config,
            "d_raw": int(self.d_raw),
            "epoch": int(self.epoch),
            "loss_history": [float(x) for x in self.loss_history],
            "rng_state": self.rng_state,
            "build_stats": self.build_stats,
            "extra": self.extra,
        }


def _rng_state(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``magic | version u32 | meta-length u64 | meta JSON | float64 blobs | sha256``."""
    path = Path(path)
    names = list(ckpt.params)
    layout = [{"name": n, "shape": list(ckpt.params[n].shape)} for n in names]
    meta = ckpt.meta()
    meta["parameters"] = layout
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<IQ", CHECKPOINT_VERSION, len(meta_bytes))
    body += meta_bytes
    for n in names:
        body += np.ascontiguousarray(ckpt.params[n], dtype="<f8").tobytes()
    body += hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(body))
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    head = len(CHECKPOINT_MAGIC) + struct.calcsize("<IQ")
    if len(raw) < head + _DIGEST_BYTES or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file (bad magic or truncated header)")
    version, meta_len = struct.unpack_from("<IQ", raw, len(CHECKPOINT_MAGIC))
    if version != CHECKPOINT_VERSION:
        raise IntegrityError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body, digest = raw[:-_DIGEST_BYTES], raw[-_DIGEST_BYTES:]
    if hashlib.sha256(body).digest() != digest:
        raise IntegrityError(f"{path}: checksum mismatch (file truncated or corrupt)")
    try:
        meta = json.loads(body[head : head + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"{path}: unreadable metadata ({exc})") from exc
    offset = head + meta_len
    params: OrderedDict[str, np.ndarray] = OrderedDict()
    for entry in meta["parameters"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = 8 * count
        if offset + nbytes > len(body):
            raise IntegrityError(f"{path}: parameter blob {entry['name']} truncated")
        params[entry["name"]] = np.frombuffer(body, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(entry["shape"])
        offset += nbytes
    if offset != len(body):
        raise IntegrityError(f"{path}: {len(body) - offset} unexpected trailing bytes")
    return Checkpoint(
        params=params,
        vocab=meta["vocab"],
        train_config=meta["train_config"],
        d_raw=meta["d_raw"],
        epoch=meta["epoch"],
        loss_history=meta["loss_history"],
        rng_state=meta["rng_state"],
        build_stats=meta["build_stats"],
        extra=meta.get("extra", {}),
    )


# -- training loop -----------------------------------------------------------------
def train(cfg: TrainConfig, dataset: Dataset, on_epoch: Callable[[int, float], None] | None = None) -> Checkpoint:
    """Fit a model on ``dataset``; deterministic in ``(cfg, dataset)``."""
    if len(dataset) == 0:
        raise ConfigError("dataset", "training set is empty")
    vocab = dataset.vocab
    cfg.validate(len(vocab))
    tokenizer = Tokenizer(vocab)
    prompts = PromptCache(tokenizer)
    d_raw = dataset.patches.shape[2]
    model = BiMcqModel(cfg.model, d_raw, len(tokenizer), cfg.seed)
    optimizer = Adam(model.trainable_parameters(), learning_rate=cfg.learning_rate)
    shuffle_rng = substream(cfg.seed, "shuffle")
    mcq_rng = substream(cfg.seed, "mcq")
    stats = BuildStats()
    history: list[float] = []
    n = len(dataset)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        batch_losses = []
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = np.sort(order[start : start + cfg.batch_size])
            if len(idx) < 2:
                continue
            patches, labels = dataset.patches[idx], dataset.labels[idx]
            try:
                if cfg.objective is Objective.BIMCQ:
                    loss = bimcq_batch_loss(model, prompts, patches, labels, cfg.mcq, mcq_rng, stats)
                else:
                    loss = infonce_batch_loss(model, prompts, patches, labels, cfg.objective, cfg.temperature,
                                              cfg.infonce_prompts)
            except NumericError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
            if loss is None:
                continue
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
            loss.backward()
            optimizer.step()
            optimizer.zero_grad()
            batch_losses.append(value)
        epoch_loss = float(np.mean(batch_losses)) if batch_losses else float("nan")
        history.append(epoch_loss)
        log.info("epoch %d loss %.6f", epoch, epoch_loss)
        if on_epoch is not None:
            on_epoch(epoch, epoch_loss)

    return Checkpoint(
        params=model.state_dict(),
        vocab=list(vocab.names),
        train_config=cfg.to_dict(),
        d_raw=int(d_raw),
        epoch=cfg.epochs,
        loss_history=history,
        rng_state={"shuffle": _rng_state(shuffle_rng), "mcq": _rng_state(mcq_rng)},
        build_stats=stats.as_dict(),
        extra={"dataset_id": dataset.fingerprint},
    )
