"""POS / NEG / PNC inference protocols, AUC / F1 / MCC, reports and embedding dumps.

For each image and disease ``c`` the scorer produces ``S_pos`` for the prompt
``there is c .`` and ``S_neg`` for ``there is no c .``.

* POS: presence targets scored by ``S_pos``.
* NEG: absence targets (``1 - y``) scored by ``S_neg``.
* PNC: presence targets scored by ``softmax([S_pos, S_neg])[0]``.

F1 and MCC threshold ``sigmoid(S)`` (POS, NEG) or the PNC probability at 0.5.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .data import Dataset
from .errors import ConfigError, UndefinedMetricError
from .model import BiMcqModel
from .prompts import PromptSpec, Tokenizer, is_consistent
from .tensor import l2_normalize, matmul
from .tensor.core import transpose

log = logging.getLogger(__name__)

PROTOCOLS = ("POS", "NEG", "PNC")
METRICS = ("auc", "f1", "mcc")


class Protocol(str, enum.Enum):
    POS = "POS"
    NEG = "NEG"
    PNC = "PNC"


# -- metrics ----------------------------------------------------------------------
def auc(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted one half, via average ranks."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be matching 1-D arrays")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC is undefined when only one class is present")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def confusion(pred, labels) -> tuple[int, int, int, int]:
    pred = np.asarray(pred, dtype=bool)
    labels = np.asarray(labels, dtype=bool)
    if pred.shape != labels.shape:
        raise ValueError("pred and labels must have the same shape")
    tp = int(np.sum(pred & labels))
    tn = int(np.sum(~pred & ~labels))
    fp = int(np.sum(pred & ~labels))
    fn = int(np.sum(~pred & labels))
    return tp, tn, fp, fn


def mcc_from_counts(tp: int, tn: int, fp: int, fn: int) -> float:
    denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denom == 0:
        return 0.0
    return float((tp * tn - fp * fn) / math.sqrt(denom))


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else float(2 * tp / denom)


def mcc(pred, labels) -> float:
    if len(pred) == 0:
        raise ValueError("mcc needs at least one prediction")
    tp, tn, fp, fn = confusion(pred, labels)
    return mcc_from_counts(tp, tn, fp, fn)


def f1(pred, labels) -> float:
    if len(pred) == 0:
        raise ValueError("f1 needs at least one prediction")
    tp, _, fp, fn = confusion(pred, labels)
    return f1_from_counts(tp, fp, fn)


def pnc(s_pos, s_neg):
    """Probability of presence, ``softmax([s_pos, s_neg])[0]``.

    Written as ``1 - lo`` / ``lo`` with ``lo = 1 / (1 + exp(|s_pos - s_neg|))``
    so that swapping the arguments gives exactly the complement and equal
    logits give exactly 0.5.
    """
    d = np.asarray(s_pos, dtype=np.float64) - np.asarray(s_neg, dtype=np.float64)
    with np.errstate(over="ignore"):
        lo = 1.0 / (1.0 + np.exp(np.abs(d)))
    return np.where(d >= 0, 1.0 - lo, lo)


def logistic(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# -- scoring ----------------------------------------------------------------------
class Scorer:
    """Scores single-disease prompts against images.

    ``mode="head"`` uses the image-to-text fusion head; ``mode="cosine"``
    uses the temperature-scaled cosine similarity of global embeddings, which
    is the similarity an InfoNCE-trained model was optimised for.
    """

    def __init__(self, model: BiMcqModel, tokenizer: Tokenizer, mode: str = "head", temperature: float = 1.0):
        if mode not in ("head", "cosine"):
            raise ConfigError("mode", f"unknown scorer mode {mode!r}")
        self.model = model
        self.tokenizer = tokenizer
        self.mode = mode
        self.temperature = temperature

    @classmethod
    def from_checkpoint(cls, ckpt) -> "Scorer":
        cfg = ckpt.config
        mode = "cosine" if cfg.objective.is_infonce else "head"
        return cls(ckpt.build_model(), ckpt.tokenizer(), mode, cfg.temperature if mode == "cosine" else 1.0)

    @property
    def vocab(self):
        return self.tokenizer.vocab

    def prompt_specs(self) -> list[PromptSpec]:
        """``[pos_0, neg_0, pos_1, neg_1, ...]`` over the disease vocabulary."""
        specs = []
        for c in range(len(self.vocab)):
            specs += [PromptSpec(affirmed=[c]), PromptSpec(negated=[c])]
        return specs

    def check_dataset(self, dataset: Dataset) -> None:
        if dataset.vocab.names != self.vocab.names:
            raise ConfigError("vocab", f"dataset vocabulary {dataset.vocab.names} differs from model {self.vocab.names}")
        if dataset.patches.shape[2] != self.model.image_encoder.d_raw:
            raise ConfigError("d_raw", f"dataset patch width {dataset.patches.shape[2]} != model {self.model.image_encoder.d_raw}")

    def prompt_logits(self, dataset: Dataset, chunk: int = 1024) -> tuple[np.ndarray, np.ndarray]:
        """``(S_pos, S_neg)``, each ``(n_samples, D)``."""
        self.check_dataset(dataset)
        n, n_dis = len(dataset), len(self.vocab)
        texts = self.model.encode_texts([self.tokenizer.encode(s) for s in self.prompt_specs()])
        out = np.zeros((n, 2 * n_dis))
        for start in range(0, n, chunk):
            patches = dataset.patches[start : start + chunk]
            images = self.model.encode_images(patches)
            b = len(patches)
            if self.mode == "cosine":
                zi = l2_normalize(images.global_, axis=-1)
                zt = l2_normalize(texts.global_, axis=-1)
                out[start : start + b] = matmul(zi, transpose(zt)).data / self.temperature
            else:
                img_idx = np.repeat(np.arange(b), 2 * n_dis)
                txt_idx = np.tile(np.arange(2 * n_dis), b)
                out[start : start + b] = self.model.i2t_pairs(images, texts, img_idx, txt_idx).data.reshape(b, 2 * n_dis)
        return out[:, 0::2].copy(), out[:, 1::2].copy()


@dataclass
class ScoreMatrix:
    scores: np.ndarray
    protocol: Protocol


def scores_for_protocol(s_pos: np.ndarray, s_neg: np.ndarray, protocol) -> ScoreMatrix:
    protocol = Protocol(protocol)
    if protocol is Protocol.POS:
        return ScoreMatrix(s_pos, protocol)
    if protocol is Protocol.NEG:
        return ScoreMatrix(s_neg, protocol)
    return ScoreMatrix(pnc(s_pos, s_neg), protocol)


def infer_scores(scorer: Scorer, dataset: Dataset, protocol) -> ScoreMatrix:
    s_pos, s_neg = scorer.prompt_logits(dataset)
    return scores_for_protocol(s_pos, s_neg, protocol)


# -- reports ----------------------------------------------------------------------
@dataclass
class ProtocolResult:
    per_disease: dict[str, dict[str, float | None]]
    macro: dict[str, float | None]
    omitted: list[str] = field(default_factory=list)


@dataclass
class EvalReport:
    protocols: dict[str, ProtocolResult]
    meta: dict = field(default_factory=dict)

    def macro(self, protocol: str, metric: str = "auc") -> float | None:
        return self.protocols[protocol].macro[metric]

    def to_dict(self) -> dict:
        return {
            "meta": self.meta,
            "protocols": {
                p: {"per_disease": r.per_disease, "macro": r.macro, "omitted": r.omitted}
                for p, r in self.protocols.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "EvalReport":
        protos = {
            p: ProtocolResult(r["per_disease"], r["macro"], list(r.get("omitted", [])))
            for p, r in data["protocols"].items()
        }
        return cls(protos, dict(data.get("meta", {})))

    def table(self) -> str:
        """Aligned text table: one row per disease plus macro, POS / NEG / PNC column groups."""
        names = list(next(iter(self.protocols.values())).per_disease)
        header1 = f"{'':<20}" + "".join(f"{p:^24}" for p in PROTOCOLS)
        header2 = f"{'disease':<20}" + "".join(f"{m.upper():>8}" for _ in PROTOCOLS for m in METRICS)
        lines = [header1, header2, "-" * len(header2)]

        def cell(v):
            return f"{'-':>8}" if v is None else f"{v:>8.4f}"

        for name in names:
            lines.append(f"{name:<20}" + "".join(cell(self.protocols[p].per_disease[name][m]) for p in PROTOCOLS for m in METRICS))
        lines.append("-" * len(header2))
        lines.append(f"{'macro':<20}" + "".join(cell(self.protocols[p].macro[m]) for p in PROTOCOLS for m in METRICS))
        return "\n".join(lines)


def protocol_result(scores: np.ndarray, targets: np.ndarray, preds: np.ndarray, names, protocol: str) -> ProtocolResult:
    per: dict[str, dict[str, float | None]] = {}
    omitted: list[str] = []
    for c, name in enumerate(names):
        try:
            a = auc(scores[:, c], targets[:, c])
        except UndefinedMetricError:
            log.warning("%s/%s: single-class targets, omitted from the macro average", protocol, name)
            omitted.append(name)
            per[name] = {"auc": None, "f1": f1(preds[:, c], targets[:, c]), "mcc": mcc(preds[:, c], targets[:, c])}
            continue
        per[name] = {"auc": a, "f1": f1(preds[:, c], targets[:, c]), "mcc": mcc(preds[:, c], targets[:, c])}
    kept = [n for n in names if n not in omitted]
    macro = {m: (float(np.mean([per[n][m] for n in kept])) if kept else None) for m in METRICS}
    return ProtocolResult(per, macro, omitted)


def report_from_logits(s_pos: np.ndarray, s_neg: np.ndarray, labels: np.ndarray, names, meta: dict | None = None) -> EvalReport:
    labels = np.asarray(labels, dtype=bool)
    p = pnc(s_pos, s_neg)
    results = {
        "POS": protocol_result(s_pos, labels, logistic(s_pos) >= 0.5, names, "POS"),
        "NEG": protocol_result(s_neg, ~labels, logistic(s_neg) >= 0.5, names, "NEG"),
        "PNC": protocol_result(p, labels, p >= 0.5, names, "PNC"),
    }
    return EvalReport(results, dict(meta or {}))


def evaluate(scorer: Scorer, dataset: Dataset, meta: dict | None = None) -> EvalReport:
    s_pos, s_neg = scorer.prompt_logits(dataset)
    info = {"dataset_id": dataset.fingerprint, "n_samples": len(dataset), "scorer": scorer.mode}
    info.update(meta or {})
    return report_from_logits(s_pos, s_neg, dataset.labels, list(dataset.vocab.names), info)


# -- embedding dump ----------------------------------------------------------------
def embedding_rows(scorer: Scorer, dataset: Dataset):
    """Yield ``(sample_id, disease, polarity, truth, direction, h)`` in file order."""
    scorer.check_dataset(dataset)
    model, n_dis = scorer.model, len(scorer.vocab)
    specs = scorer.prompt_specs()
    texts = model.encode_texts([scorer.tokenizer.encode(s) for s in specs])
    images = model.encode_images(dataset.patches)
    n = len(dataset)
    img_idx = np.repeat(np.arange(n), 2 * n_dis)
    txt_idx = np.tile(np.arange(2 * n_dis), n)
    _, h_i2t = model.i2t_pairs(images, texts, img_idx, txt_idx, return_hidden=True)
    _, h_t2i = model.t2i_pairs(texts, images, txt_idx, img_idx, return_hidden=True)
    h_i2t = h_i2t.data.reshape(n, 2 * n_dis, -1)
    h_t2i = h_t2i.data.reshape(n, 2 * n_dis, -1)
    for i in range(n):
        for c in range(n_dis):
            for j, polarity in ((2 * c, "pos"), (2 * c + 1, "neg")):
                truth = is_consistent(specs[j], dataset.labels[i])
                yield dataset.ids[i], scorer.vocab.names[c], polarity, truth, "I2T", h_i2t[i, j]
                yield dataset.ids[i], scorer.vocab.names[c], polarity, truth, "T2I", h_t2i[i, j]


def dump_embeddings(scorer: Scorer, dataset: Dataset, path) -> int:
    """Write the attended I2T / T2I vectors as TSV; returns the number of rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for sid, disease, polarity, truth, direction, h in embedding_rows(scorer, dataset):
            values = "\t".join(repr(float(x)) for x in h)
            fh.write(f"{sid}\t{disease}\t{polarity}\t{int(truth)}\t{direction}\t{values}\n")
            count += 1
    return count
