"""Datasets, labelled splits, the synthetic generator and the binary file format.

File layout (little-endian)::

    b"ULAB" | u32 version | u32 N | u32 d | u32 C
    N*d float64 samples (row-major) | N uint16 labels | N uint8 split mask

The split mask is 1 for training rows and 0 for test rows.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, InputError

MAGIC = b"ULAB"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class LabeledSet:
    """Samples with labels; ``ids`` index the parent dataset (-1 = synthetic)."""

    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray | None = None

    def __len__(self):
        return len(self.y)

    def subset(self, idx):
        ids = None if self.ids is None else self.ids[idx]
        return LabeledSet(self.x[idx], self.y[idx], ids)

    @classmethod
    def concat(cls, parts):
        parts = [p for p in parts if len(p)]
        if not parts:
            raise InputError("nothing to concatenate")
        ids = None
        if all(p.ids is not None for p in parts):
            ids = np.concatenate([p.ids for p in parts])
        return cls(np.concatenate([p.x for p in parts]), np.concatenate([p.y for p in parts]), ids)


@dataclass
class Dataset:
    samples: np.ndarray
    labels: np.ndarray
    n_classes: int
    train_mask: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.train_mask = np.asarray(self.train_mask, dtype=bool)
        n = len(self.samples)
        if self.samples.ndim != 2:
            raise InputError("samples must be an N x d matrix")
        if self.labels.shape != (n,) or self.train_mask.shape != (n,):
            raise InputError("labels and split mask must have one entry per sample")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise InputError("labels out of range")

    def __len__(self):
        return len(self.labels)

    @property
    def n_features(self):
        return self.samples.shape[1]

    @property
    def train_ids(self):
        return np.flatnonzero(self.train_mask)

    @property
    def test_ids(self):
        return np.flatnonzero(~self.train_mask)

    def take(self, ids):
        ids = np.asarray(ids, dtype=np.int64)
        return LabeledSet(self.samples[ids], self.labels[ids], ids)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.n_classes == other.n_classes
                and np.array_equal(self.samples, other.samples)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.train_mask, other.train_mask))


def class_directions(n_classes, d):
    """Fixed unit vectors: the standard basis when it fits, else a seeded draw."""
    if n_classes <= d:
        return np.eye(d)[:n_classes]
    u = np.random.default_rng(20240917).normal(size=(n_classes, d))
    return u / np.linalg.norm(u, axis=1, keepdims=True)


def gen_gaussian_classes(n_classes, per_class, d, separation, seed):
    """Isotropic unit-variance blobs centred at ``separation * u_c``.

    Every fifth sample of each class (positions 4, 9, ...) goes to the test
    split, giving a deterministic 80/20 split.
    """
    if n_classes < 2 or per_class < 2 or d < 1 or separation < 0:
        raise InputError("need n_classes >= 2, per_class >= 2, d >= 1, separation >= 0")
    rng = np.random.default_rng(seed)
    centres = separation * class_directions(n_classes, d)
    samples = np.concatenate([c + rng.normal(size=(per_class, d)) for c in centres])
    labels = np.repeat(np.arange(n_classes), per_class)
    train = (np.arange(len(labels)) % per_class) % 5 != 4
    return Dataset(samples, labels, n_classes, train)


def save_dataset(dataset, path):
    n, d = dataset.samples.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, VERSION, n, d, dataset.n_classes))
        f.write(np.ascontiguousarray(dataset.samples, dtype="<f8").tobytes())
        f.write(dataset.labels.astype("<u2").tobytes())
        f.write(dataset.train_mask.astype("u1").tobytes())


def load_dataset(path):
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"file too short for header: {len(raw)} < {_HEADER.size} bytes", len(raw))
    magic, version, n, d, c = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    expected = _HEADER.size + n * d * 8 + n * 2 + n
    if len(raw) != expected:
        raise FormatError(
            f"header declares N={n}, d={d}: expected {expected} bytes, found {len(raw)}",
            min(len(raw), expected))
    off = _HEADER.size
    samples = np.frombuffer(raw, dtype="<f8", count=n * d, offset=off).reshape(n, d).astype(np.float64)
    off += n * d * 8
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=off).astype(np.int64)
    off += n * 2
    mask = np.frombuffer(raw, dtype="u1", count=n, offset=off)
    if np.any(mask > 1):
        raise FormatError("split mask must be 0 or 1", off + int(np.argmax(mask > 1)))
    if n and labels.max() >= c:
        raise FormatError(f"label {labels.max()} >= class count {c}", off - n * 2)
    return Dataset(samples, labels, c, mask.astype(bool))


@dataclass
class Splits:
    """Everything one unlearning run reads.

    ``retain`` is the raw retain set R; ``retain_sources`` holds alternative
    training sets (condensed, free-only, ...) keyed by retain-source tag.
    """

    retain: LabeledSet
    forget: LabeledSet
    t: LabeledSet
    test_eval: LabeledSet
    retain_sources: dict = field(default_factory=dict)

    def retain_for(self, source):
        if source == "full":
            return self.retain
        if source not in self.retain_sources:
            raise InputError(f"splits carry no retain set for source {source!r}")
        return self.retain_sources[source]


def build_splits(dataset, forget_ids, pool_ids=None):
    """R = pool - F; T = every other class-matched test sample; test_eval = the rest."""
    pool = dataset.train_ids if pool_ids is None else np.asarray(pool_ids, dtype=np.int64)
    forget = np.unique(np.asarray(forget_ids, dtype=np.int64))
    if len(forget) == 0:
        raise InputError("forget set is empty")
    if not np.isin(forget, pool).all():
        raise InputError("forget ids must come from the current training pool")
    retain = np.setdiff1d(pool, forget)
    test = dataset.test_ids
    matched = test[np.isin(dataset.labels[test], np.unique(dataset.labels[forget]))]
    t_ids = matched[::2]
    eval_ids = np.setdiff1d(test, t_ids)
    return Splits(dataset.take(retain), dataset.take(forget), dataset.take(t_ids), dataset.take(eval_ids))
