"""Prompt specifications, template rendering and the closed-vocabulary tokenizer.

Templates::

    affirmative   there is a and b .
    negative      there is no a and no b .
    mixed         there is a , and there is no b .

Diseases inside a clause are listed in ascending vocabulary order so that
rendering is a deterministic, injective function of the specification.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .data import DiseaseVocab
from .errors import ConfigError, TokenizerError

TEMPLATE_WORDS = ("there", "is", "no", "and", ",", ".")


class Polarity(str, enum.Enum):
    AFFIRMATIVE = "Affirmative"
    NEGATIVE = "Negative"
    MIXED = "Mixed"


@dataclass(frozen=True)
class PromptSpec:
    affirmed: frozenset[int]
    negated: frozenset[int]

    def __init__(self, affirmed: Iterable[int] = (), negated: Iterable[int] = ()):
        aff = frozenset(int(i) for i in affirmed)
        neg = frozenset(int(i) for i in negated)
        if aff & neg:
            raise ValueError(f"diseases {sorted(aff & neg)} are both affirmed and negated")
        if not aff and not neg:
            raise ValueError("a prompt must mention at least one disease")
        object.__setattr__(self, "affirmed", aff)
        object.__setattr__(self, "negated", neg)

    @property
    def polarity_class(self) -> Polarity:
        if self.affirmed and self.negated:
            return Polarity.MIXED
        return Polarity.AFFIRMATIVE if self.affirmed else Polarity.NEGATIVE

    @property
    def diseases(self) -> frozenset[int]:
        return self.affirmed | self.negated

    def __repr__(self) -> str:
        return f"PromptSpec(+{sorted(self.affirmed)}, -{sorted(self.negated)})"


def is_consistent(spec: PromptSpec, labels) -> bool:
    """True iff every affirmed disease is present and every negated one absent."""
    labels = np.asarray(labels, dtype=bool)
    return all(labels[i] for i in spec.affirmed) and not any(labels[i] for i in spec.negated)


def ground_truth_spec(labels, subset: Iterable[int]) -> PromptSpec:
    labels = np.asarray(labels, dtype=bool)
    subset = sorted(set(int(i) for i in subset))
    if not subset:
        raise ValueError("subset must be non-empty")
    return PromptSpec([i for i in subset if labels[i]], [i for i in subset if not labels[i]])


def render(spec: PromptSpec, vocab: DiseaseVocab) -> str:
    for i in spec.diseases:
        if not 0 <= i < len(vocab):
            raise ValueError(f"disease index {i} outside vocabulary of size {len(vocab)}")
    aff = [vocab.names[i] for i in sorted(spec.affirmed)]
    neg = [vocab.names[i] for i in sorted(spec.negated)]
    words: list[str] = []
    if aff:
        words += ["there", "is", " and ".join(aff)]
    if neg:
        if aff:
            words += [",", "and"]
        words += ["there", "is", " and ".join(f"no {n}" for n in neg)]
    words.append(".")
    return " ".join(words)


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.ids)


class Tokenizer:
    """Whitespace tokenizer over template words plus disease names."""

    def __init__(self, vocab: DiseaseVocab, max_length: int | None = None):
        clash = set(vocab.names) & set(TEMPLATE_WORDS)
        if clash:
            raise ConfigError("vocab", f"disease names collide with template words: {sorted(clash)}")
        self.vocab = vocab
        self.tokens: tuple[str, ...] = TEMPLATE_WORDS + vocab.names
        self._index = {t: i for i, t in enumerate(self.tokens)}
        self.max_length = max_length

    def __len__(self) -> int:
        return len(self.tokens)

    def tokenize(self, text: str) -> TokenSequence:
        words = text.lower().split()
        if not words:
            raise TokenizerError("empty prompt")
        ids = []
        for w in words:
            try:
                ids.append(self._index[w])
            except KeyError:
                raise TokenizerError(f"out-of-vocabulary word {w!r}") from None
        if self.max_length is not None and len(ids) > self.max_length:
            raise TokenizerError(f"prompt has {len(ids)} tokens, limit is {self.max_length}")
        return TokenSequence(tuple(ids))

    def encode(self, spec: PromptSpec) -> TokenSequence:
        return self.tokenize(render(spec, self.vocab))

    def decode(self, seq: TokenSequence) -> str:
        return " ".join(self.tokens[i] for i in seq.ids)


def pad_batch(seqs: Sequence[TokenSequence]) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad token ids with 0; returns ``(ids (B, L_max), lengths (B,))``."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    ids = np.zeros((len(seqs), int(lengths.max()) if len(seqs) else 0), dtype=np.int64)
    for row, s in enumerate(seqs):
        ids[row, : len(s)] = s.ids
    return ids, lengths
