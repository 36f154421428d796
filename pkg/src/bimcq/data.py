"""Synthetic multi-label image features, label-CSV ingestion and dataset files.

A synthetic image is a ``P x d_raw`` grid of patch features.  Each disease
owns a fixed unit direction in feature space; when the disease is present its
direction, scaled by ``signal_amplitude``, is added to a few randomly chosen
patch rows.  Gaussian noise is added everywhere.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, IntegrityError, ParseError
from .seeding import substream

CHESTXRAY14_DISEASES = (
    "atelectasis", "cardiomegaly", "effusion", "infiltration", "mass", "nodule", "pneumonia",
    "pneumothorax", "consolidation", "edema", "emphysema", "fibrosis", "pleural_thickening", "hernia",
)
NO_FINDING = "no finding"
DATASET_FORMAT = "bimcq-synth"
DATASET_VERSION = 1


def normalize_name(name: str) -> str:
    return re.sub(r"\s+", "_", name.strip().lower())


@dataclass(frozen=True)
class DiseaseVocab:
    names: tuple[str, ...]

    def __post_init__(self):
        names = tuple(normalize_name(n) for n in self.names)
        object.__setattr__(self, "names", names)
        if not names:
            raise ConfigError("vocab", "disease vocabulary is empty")
        if any(not n for n in names):
            raise ConfigError("vocab", "disease names must be non-empty")
        if len(set(names)) != len(names):
            raise ConfigError("vocab", f"disease names must be unique: {names}")

    @classmethod
    def default(cls, size: int) -> "DiseaseVocab":
        if size <= len(CHESTXRAY14_DISEASES):
            return cls(CHESTXRAY14_DISEASES[:size])
        return cls(tuple(f"disease{i}" for i in range(size)))

    def __len__(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(normalize_name(name))
        except ValueError:
            raise KeyError(name) from None


@dataclass(frozen=True)
class SynthImage:
    id: str
    patches: np.ndarray


@dataclass
class SynthConfig:
    D: int = 4
    P: int = 8
    d_raw: int = 16
    prevalence: list[float] | None = None
    signal_amplitude: float = 5.0
    noise_std: float = 0.5
    patches_per_finding: int = 2
    n_samples: int = 2000

    def __post_init__(self):
        if self.prevalence is None:
            self.prevalence = [0.3] * self.D
        elif isinstance(self.prevalence, (int, float)):
            self.prevalence = [float(self.prevalence)] * self.D
        self.prevalence = [float(p) for p in self.prevalence]

    def validate(self) -> "SynthConfig":
        if self.D < 1:
            raise ConfigError("D", "must be >= 1")
        if self.P < 1:
            raise ConfigError("P", "must be >= 1")
        if self.d_raw < self.D:
            raise ConfigError("d_raw", f"must be >= D ({self.D}) so disease directions are orthonormal")
        if len(self.prevalence) != self.D:
            raise ConfigError("prevalence", f"needs {self.D} values, got {len(self.prevalence)}")
        if any(not 0.0 < p < 1.0 for p in self.prevalence):
            raise ConfigError("prevalence", "values must lie in (0, 1)")
        if not self.signal_amplitude >= 0.0 or not math.isfinite(self.signal_amplitude):
            raise ConfigError("signal_amplitude", "must be a finite value >= 0")
        if not self.noise_std >= 0.0 or not math.isfinite(self.noise_std):
            raise ConfigError("noise_std", "must be a finite value >= 0")
        if not 1 <= self.patches_per_finding <= self.P:
            raise ConfigError("patches_per_finding", f"must lie in [1, P={self.P}]")
        if self.n_samples < 0:
            raise ConfigError("n_samples", "must be >= 0")
        return self


@dataclass
class Dataset:
    """Patch features, multi-hot labels and ids for one split."""

    ids: list[str]
    patches: np.ndarray  # (n, P, d_raw)
    labels: np.ndarray  # (n, D) bool
    vocab: DiseaseVocab
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def images(self) -> list[SynthImage]:
        return [SynthImage(i, p) for i, p in zip(self.ids, self.patches)]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.patches, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.uint8).tobytes())
        h.update("\n".join(self.ids).encode("utf-8"))
        return h.hexdigest()[:16]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset([self.ids[i] for i in idx], self.patches[idx], self.labels[idx], self.vocab, dict(self.meta))


def disease_directions(D: int, d_raw: int, seed: int) -> np.ndarray:
    """``D`` orthonormal rows in ``R^d_raw`` (Gram-Schmidt on Gaussian draws, via QR)."""
    g = substream(seed, "data/directions").normal(size=(d_raw, D))
    q, r = np.linalg.qr(g)
    q *= np.sign(np.diag(r))[None, :]
    return q.T.copy()


def generate_dataset(cfg: SynthConfig, seed: int, direction_seed: int | None = None, id_prefix: str = "synth",
                     sample_stream: str = "data/sample") -> Dataset:
    """Sample ``cfg.n_samples`` images; deterministic in its arguments.

    ``direction_seed`` defaults to ``seed``.  Keeping the directions and
    switching ``sample_stream`` gives fresh samples of the same findings,
    e.g. for a shifted external test set.
    """
    cfg.validate()
    dirs = disease_directions(cfg.D, cfg.d_raw, seed if direction_seed is None else direction_seed)
    prev = np.asarray(cfg.prevalence)
    n = cfg.n_samples
    patches = np.zeros((n, cfg.P, cfg.d_raw))
    labels = np.zeros((n, cfg.D), dtype=bool)
    for i in range(n):
        rng = substream(seed, sample_stream, i)
        present = rng.random(cfg.D) < prev
        labels[i] = present
        if cfg.noise_std > 0:
            patches[i] = rng.normal(0.0, cfg.noise_std, size=(cfg.P, cfg.d_raw))
        if cfg.signal_amplitude > 0:
            for c in np.flatnonzero(present):
                rows = rng.choice(cfg.P, size=cfg.patches_per_finding, replace=False)
                patches[i, rows] += cfg.signal_amplitude * dirs[c]
    ids = [f"{id_prefix}{i:06d}" for i in range(n)]
    vocab = DiseaseVocab.default(cfg.D)
    meta = {"config": asdict(cfg), "seed": int(seed), "direction_seed": int(seed if direction_seed is None else direction_seed)}
    return Dataset(ids, patches, labels, vocab, meta)


def load_labels(path, vocab: DiseaseVocab) -> tuple[list[str], np.ndarray]:
    """Read a ChestXray14-style CSV (``Image Index``, ``Finding Labels`` columns).

    ``Finding Labels`` is ``|``-separated; ``No Finding`` is the all-absent
    vector.  Label names are matched case-insensitively against ``vocab``.
    """
    path = Path(path)
    if not path.is_file():
        raise ParseError("label file not found", path=path)
    ids: list[str] = []
    rows: list[np.ndarray] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("missing header row", line=1, path=path) from None
        header = [h.strip() for h in header]
        try:
            id_col = header.index("Image Index")
            lab_col = header.index("Finding Labels")
        except ValueError:
            raise ParseError("header must contain 'Image Index' and 'Finding Labels'", line=1, path=path) from None
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", line=line, path=path)
            image_id = row[id_col].strip()
            if not image_id:
                raise ParseError("empty Image Index", line=line, path=path)
            bits = np.zeros(len(vocab), dtype=bool)
            field_value = row[lab_col].strip()
            tokens = [t.strip() for t in field_value.split("|")]
            if field_value.lower() == NO_FINDING:
                pass
            elif any(not t for t in tokens):
                raise ParseError(f"empty label in {field_value!r}", line=line, path=path)
            else:
                for tok in tokens:
                    try:
                        bits[vocab.index(tok)] = True
                    except KeyError:
                        raise ParseError(f"unknown disease label {tok!r}", line=line, path=path) from None
            ids.append(image_id)
            rows.append(bits)
    labels = np.array(rows, dtype=bool).reshape(len(rows), len(vocab))
    return ids, labels


def split(n: int, fractions: Sequence[float], seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Random train/test partition of ``range(n)``.

    The train part gets ``floor(n * fractions[0])`` indices and the test part
    the remainder.
    """
    if len(fractions) != 2:
        raise ConfigError("fractions", "expected (train, test)")
    f_train, f_test = (float(f) for f in fractions)
    if f_train < 0 or f_test < 0 or abs(f_train + f_test - 1.0) > 1e-9:
        raise ConfigError("fractions", f"must be non-negative and sum to 1, got {fractions}")
    if n <= 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    perm = substream(seed, "data/split").permutation(n)
    n_train = min(n, int(math.floor(n * f_train + 1e-9)))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


def realized_prevalence(labels: np.ndarray) -> list[float]:
    if len(labels) == 0:
        return [0.0] * labels.shape[1]
    return [float(x) for x in labels.mean(axis=0)]


# -- on-disk format -----------------------------------------------------------
def save_dataset(directory, splits: dict[str, Dataset], extra_meta: dict | None = None) -> Path:
    """Write ``meta.json`` plus one little-endian float64 file per split."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocabs = {ds.vocab.names for ds in splits.values()}
    if len(vocabs) > 1:
        raise ConfigError("vocab", "all splits must share one vocabulary")
    meta = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "vocab": list(next(iter(vocabs))) if vocabs else [],
        "splits": {},
    }
    if extra_meta:
        meta.update(extra_meta)
    for name, ds in splits.items():
        fname = f"{name}.f64"
        ds.patches.astype("<f8").tofile(directory / fname)
        meta["splits"][name] = {
            "file": fname,
            "shape": list(ds.patches.shape),
            "ids": list(ds.ids),
            "labels": ds.labels.astype(int).tolist(),
        }
    (directory / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return directory


def read_meta(directory) -> dict:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.is_file():
        raise FileNotFoundError(f"no dataset at {directory} (missing meta.json)")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("format") != DATASET_FORMAT or meta.get("version") != DATASET_VERSION:
        raise IntegrityError(f"{meta_path}: unsupported dataset format {meta.get('format')!r} v{meta.get('version')}")
    return meta


def load_dataset(directory, split_name: str) -> Dataset:
    directory = Path(directory)
    meta = read_meta(directory)
    if split_name not in meta["splits"]:
        raise KeyError(f"split {split_name!r} not in dataset (have {sorted(meta['splits'])})")
    info = meta["splits"][split_name]
    shape = tuple(info["shape"])
    raw = np.fromfile(directory / info["file"], dtype="<f8")
    if raw.size != int(np.prod(shape)):
        raise IntegrityError(f"{info['file']}: expected {int(np.prod(shape))} values, found {raw.size}")
    labels = np.array(info["labels"], dtype=bool).reshape(shape[0], len(meta["vocab"]))
    ds_meta = {k: v for k, v in meta.items() if k not in ("splits",)}
    ds_meta["split"] = split_name
    return Dataset(list(info["ids"]), raw.astype(np.float64).reshape(shape), labels, DiseaseVocab(tuple(meta["vocab"])), ds_meta)
