"""Image-to-text and text-to-image multiple-choice instances from multi-hot labels.

I2T: for a query image, pick ``k`` diseases and enumerate every polarity
assignment over them.  Exactly one assignment agrees with the image's labels;
it is the correct candidate.

T2I: for every (image, k-subset) the ground-truth prompt becomes a query.  The
source image is the correct option, batch images that contradict the prompt
are distractors, and other images that also satisfy it are dropped from the
options.  Prompts left with too few distractors are excluded.
"""
from __future__ import annotations

import itertools
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ConstructionError
from .prompts import Polarity, PromptSpec, ground_truth_spec

MAX_SUBSET_RETRIES = 64
MAX_SUBSET_SIZE = 12


@dataclass
class McqConfig:
    subset_size: int = 2
    max_candidates: int = 4
    min_t2i_options: int = 2
    use_mixed: bool = True
    max_t2i_options: int | None = None
    t2i_cap_factor: int = 2

    def validate(self, n_diseases: int | None = None) -> "McqConfig":
        k = self.subset_size
        if not 1 <= k <= MAX_SUBSET_SIZE:
            raise ConfigError("subset_size", f"must lie in [1, {MAX_SUBSET_SIZE}]")
        if n_diseases is not None and k > n_diseases:
            raise ConfigError("subset_size", f"{k} exceeds the {n_diseases} diseases in the vocabulary")
        if not 2 <= self.max_candidates <= 2**k:
            raise ConfigError("max_candidates", f"must lie in [2, 2^subset_size = {2**k}]")
        if self.min_t2i_options < 2:
            raise ConfigError("min_t2i_options", "must be >= 2")
        if self.max_t2i_options is not None and self.max_t2i_options < self.min_t2i_options:
            raise ConfigError("max_t2i_options", "must be >= min_t2i_options")
        if self.t2i_cap_factor < 1:
            raise ConfigError("t2i_cap_factor", "must be >= 1")
        return self


@dataclass(frozen=True)
class I2tInstance:
    query_image_index: int
    candidates: tuple[PromptSpec, ...]
    correct: int


@dataclass(frozen=True)
class T2iInstance:
    query_prompt: PromptSpec
    source_image_index: int
    options: tuple[int, ...]
    correct: int


@dataclass
class BuildStats:
    i2t_instances: int = 0
    t2i_instances: int = 0
    t2i_excluded: int = 0
    t2i_capped: int = 0
    polarity_counts: Counter = field(default_factory=Counter)

    def merge(self, other: "BuildStats") -> None:
        self.i2t_instances += other.i2t_instances
        self.t2i_instances += other.t2i_instances
        self.t2i_excluded += other.t2i_excluded
        self.t2i_capped += other.t2i_capped
        self.polarity_counts.update(other.polarity_counts)

    def as_dict(self) -> dict:
        return {
            "i2t_instances": self.i2t_instances,
            "t2i_instances": self.t2i_instances,
            "t2i_excluded": self.t2i_excluded,
            "t2i_capped": self.t2i_capped,
            "polarity_counts": {p.value: self.polarity_counts.get(p, 0) for p in Polarity},
        }


def _assignments(subset: list[int], use_mixed: bool) -> list[PromptSpec]:
    out = []
    for bits in itertools.product((True, False), repeat=len(subset)):
        aff = [d for d, b in zip(subset, bits) if b]
        neg = [d for d, b in zip(subset, bits) if not b]
        spec = PromptSpec(aff, neg)
        if use_mixed or spec.polarity_class is not Polarity.MIXED:
            out.append(spec)
    return out


def enumerate_candidates(labels, k: int, cfg: McqConfig, rng: np.random.Generator) -> tuple[list[PromptSpec], int]:
    """Candidate prompts for one query image and the index of the consistent one."""
    labels = np.asarray(labels, dtype=bool)
    n_diseases = labels.shape[0]
    if k > n_diseases:
        raise ConstructionError(f"subset size {k} exceeds {n_diseases} diseases")
    for _ in range(MAX_SUBSET_RETRIES):
        subset = sorted(int(i) for i in rng.choice(n_diseases, size=k, replace=False))
        truth = ground_truth_spec(labels, subset)
        if not cfg.use_mixed and truth.polarity_class is Polarity.MIXED:
            continue
        distractors = [c for c in _assignments(subset, cfg.use_mixed) if c != truth]
        if len(distractors) + 1 > cfg.max_candidates:
            keep = rng.choice(len(distractors), size=cfg.max_candidates - 1, replace=False)
            distractors = [distractors[i] for i in sorted(keep)]
        pool = [truth] + distractors
        order = rng.permutation(len(pool))
        candidates = [pool[i] for i in order]
        return candidates, int(np.flatnonzero(order == 0)[0])
    raise ConstructionError(
        f"no {k}-subset gave an admissible ground-truth prompt after {MAX_SUBSET_RETRIES} draws "
        f"(use_mixed={cfg.use_mixed}, labels={labels.astype(int).tolist()})"
    )


def build_i2t(batch_labels, cfg: McqConfig, rng: np.random.Generator, stats: BuildStats | None = None) -> list[I2tInstance]:
    batch_labels = np.asarray(batch_labels, dtype=bool)
    if len(batch_labels) == 0:
        raise ConstructionError("cannot build I2T instances from an empty batch")
    out = []
    for q, labels in enumerate(batch_labels):
        cands, correct = enumerate_candidates(labels, cfg.subset_size, cfg, rng)
        out.append(I2tInstance(q, tuple(cands), correct))
        if stats is not None:
            stats.i2t_instances += 1
            stats.polarity_counts.update(c.polarity_class for c in cands)
    return out


def _consistent_mask(spec: PromptSpec, batch_labels: np.ndarray) -> np.ndarray:
    mask = np.ones(len(batch_labels), dtype=bool)
    if spec.affirmed:
        mask &= batch_labels[:, sorted(spec.affirmed)].all(axis=1)
    if spec.negated:
        mask &= ~batch_labels[:, sorted(spec.negated)].any(axis=1)
    return mask


def build_t2i(batch_labels, cfg: McqConfig, rng: np.random.Generator, stats: BuildStats | None = None) -> list[T2iInstance]:
    batch_labels = np.asarray(batch_labels, dtype=bool)
    b = len(batch_labels)
    if b < cfg.min_t2i_options:
        return []
    n_diseases = batch_labels.shape[1]
    subsets = list(itertools.combinations(range(n_diseases), cfg.subset_size))
    queries = []
    for src in range(b):
        for subset in subsets:
            spec = ground_truth_spec(batch_labels[src], subset)
            if cfg.use_mixed or spec.polarity_class is not Polarity.MIXED:
                queries.append((src, spec))
    cap = cfg.t2i_cap_factor * b
    out: list[T2iInstance] = []
    excluded = capped = 0
    for qi in rng.permutation(len(queries)):
        src, spec = queries[qi]
        if len(out) >= cap:
            capped += 1
            continue
        consistent = _consistent_mask(spec, batch_labels)
        distractors = np.flatnonzero(~consistent)
        if len(distractors) < cfg.min_t2i_options - 1:
            excluded += 1
            continue
        if cfg.max_t2i_options is not None and len(distractors) > cfg.max_t2i_options - 1:
            distractors = np.sort(rng.choice(distractors, size=cfg.max_t2i_options - 1, replace=False))
        pool = np.concatenate([[src], distractors])
        order = rng.permutation(len(pool))
        out.append(T2iInstance(spec, int(src), tuple(int(i) for i in pool[order]), int(np.flatnonzero(order == 0)[0])))
    if stats is not None:
        stats.t2i_instances += len(out)
        stats.t2i_excluded += excluded
        stats.t2i_capped += capped
        stats.polarity_counts.update(inst.query_prompt.polarity_class for inst in out)
    return out

