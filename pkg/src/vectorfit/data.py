"""Datasets: synthetic blobs and moons, CSV classification, and char-level LM text.

Batch order is a pure function of (seed, step), so a resumed run sees
exactly the batches an uninterrupted run would.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError

DATASET_KINDS = ("csv_classification", "char_lm", "synthetic_blobs", "synthetic_moons")

# fixed character vocabulary: newline plus printable ASCII
VOCAB = "\n" + "".join(chr(c) for c in range(32, 127))
_CHAR_TO_ID = {c: i for i, c in enumerate(VOCAB)}
_UNKNOWN = _CHAR_TO_ID["?"]


def encode(text: str) -> np.ndarray:
    return np.array([_CHAR_TO_ID.get(c, _UNKNOWN) for c in text], dtype=np.int64)


def decode(ids) -> str:
    return "".join(VOCAB[int(i)] for i in ids)


def bundled_corpus(name: str) -> str:
    """Text of a corpus shipped with the package (``"a"`` or ``"b"``)."""
    return resources.files("vectorfit").joinpath("corpora", f"corpus_{name}.txt").read_text(encoding="utf-8")


class ClassificationData:
    task = "classification"

    def __init__(self, X_train, y_train, X_val, y_val, dtype=np.float32):
        self.X_train = np.asarray(X_train, dtype=dtype)
        self.y_train = np.asarray(y_train, dtype=np.int64)
        self.X_val = np.asarray(X_val, dtype=dtype)
        self.y_val = np.asarray(y_val, dtype=np.int64)
        if len(self.X_train) == 0:
            raise ValidationError("empty training split")

    @property
    def n_train(self) -> int:
        return len(self.X_train)

    @property
    def n_features(self) -> int:
        return self.X_train.shape[1]

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_val.max() if len(self.y_val) else 0)) + 1

    def steps_per_epoch(self, batch_size: int) -> int:
        return max(1, self.n_train // batch_size)

    def batch(self, step: int, batch_size: int, seed: int):
        spe = self.steps_per_epoch(batch_size)
        epoch, pos = divmod(step, spe)
        perm = np.random.default_rng([seed, epoch, 11]).permutation(self.n_train)
        bs = min(batch_size, self.n_train)
        idx = perm[pos * bs:(pos + 1) * bs]
        return self.X_train[idx], self.y_train[idx]

    def eval_batches(self, split: str = "val", batch_size: int = 256):
        X, y = (self.X_val, self.y_val) if split == "val" else (self.X_train, self.y_train)
        for i in range(0, len(X), batch_size):
            yield X[i:i + batch_size], y[i:i + batch_size]


class CharLMData:
    task = "lm"

    def __init__(self, train_ids, val_ids, seq_len: int):
        self.train = np.asarray(train_ids, dtype=np.int64)
        self.val = np.asarray(val_ids, dtype=np.int64)
        self.seq_len = seq_len
        if len(self.train) <= seq_len + 1 or len(self.val) <= seq_len + 1:
            raise ValidationError(f"corpus splits too short for seq_len={seq_len}")

    def steps_per_epoch(self, batch_size: int) -> int:
        return max(1, len(self.train) // (batch_size * self.seq_len))

    def batch(self, step: int, batch_size: int, seed: int):
        rng = np.random.default_rng([seed, step, 13])
        starts = rng.integers(0, len(self.train) - self.seq_len - 1, batch_size)
        return self._windows(self.train, starts)

    def _windows(self, ids, starts):
        offs = np.arange(self.seq_len)
        x = ids[starts[:, None] + offs]
        y = ids[starts[:, None] + offs + 1]
        return x, y

    def eval_batches(self, split: str = "val", batch_size: int = 64):
        ids = self.val if split == "val" else self.train
        starts = np.arange(0, len(ids) - self.seq_len - 1, self.seq_len)
        for i in range(0, len(starts), batch_size):
            yield self._windows(ids, starts[i:i + batch_size])


@dataclass(frozen=True)
class DatasetDescriptor:
    kind: str = "synthetic_blobs"
    path: str = ""
    n_samples: int = 600
    n_features: int = 2
    n_classes: int = 2
    noise: float = 0.5
    shift: float = 0.0
    data_seed: int = 0
    train_frac: float = 0.8
    val_frac: float = 0.2
    normalize: bool = False
    seq_len: int = 32

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValidationError(f"unknown dataset kind {self.kind!r}")
        if abs(self.train_frac + self.val_frac - 1.0) > 1e-9:
            raise ValidationError(f"split fractions sum to {self.train_frac + self.val_frac}, not 1")
        if not 0.0 < self.train_frac < 1.0:
            raise ValidationError("train_frac must lie in (0, 1)")
        if self.kind == "csv_classification" and not self.path:
            raise ValidationError("csv_classification needs a path")

    def to_dict(self) -> dict:
        return asdict(self)


def make_blobs(n: int, n_features: int = 2, n_classes: int = 2, noise: float = 0.5,
               shift: float = 0.0, seed: int = 0):
    """Gaussian clusters with centers on a ring of radius 3; ``shift`` rotates the
    ring (radians) and translates it along the first axis by the same amount."""
    rng = np.random.default_rng([seed, 101])
    angles = 2 * np.pi * np.arange(n_classes) / n_classes + shift
    centers = np.zeros((n_classes, n_features))
    centers[:, 0] = 3 * np.cos(angles) + shift
    if n_features > 1:
        centers[:, 1] = 3 * np.sin(angles)
    y = rng.integers(0, n_classes, n)
    X = centers[y] + noise * rng.standard_normal((n, n_features))
    return X, y


def make_moons(n: int, noise: float = 0.1, shift: float = 0.0, seed: int = 0):
    rng = np.random.default_rng([seed, 202])
    y = rng.integers(0, 2, n)
    t = rng.uniform(0, np.pi, n)
    X = np.where(y[:, None] == 0,
                 np.column_stack([np.cos(t), np.sin(t)]),
                 np.column_stack([1 - np.cos(t), 0.5 - np.sin(t)]))
    X = X + noise * rng.standard_normal((n, 2))
    X[:, 0] += shift
    return X, y


def load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Header row, numeric feature columns, integer label in the last column."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValidationError(f"{path}: need a header and at least one row")
    try:
        body = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
    except ValueError as exc:
        raise ValidationError(f"{path}: non-numeric entry ({exc})") from None
    return body[:, :-1], body[:, -1].astype(np.int64)


def _split(n: int, train_frac: float, seed: int):
    perm = np.random.default_rng([seed, 303]).permutation(n)
    cut = int(round(n * train_frac))
    return perm[:cut], perm[cut:]


def read_text(path: str) -> str:
    """Read a corpus; ``bundled:<name>`` selects a packaged one."""
    if path.startswith("bundled:"):
        return bundled_corpus(path.split(":", 1)[1])
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"corpus file not found: {p}")
    return p.read_text(encoding="utf-8")


def load_dataset(desc: DatasetDescriptor, dtype=np.float32):
    if desc.kind == "char_lm":
        text = read_text(desc.path or "bundled:a")
        ids = encode(text)
        cut = int(round(len(ids) * desc.train_frac))
        return CharLMData(ids[:cut], ids[cut:], desc.seq_len)
    if desc.kind == "csv_classification":
        X, y = load_csv(desc.path)
    elif desc.kind == "synthetic_blobs":
        X, y = make_blobs(desc.n_samples, desc.n_features, desc.n_classes, desc.noise, desc.shift, desc.data_seed)
    else:
        X, y = make_moons(desc.n_samples, desc.noise, desc.shift, desc.data_seed)
    tr, va = _split(len(X), desc.train_frac, desc.data_seed)
    if desc.normalize:
        mu = X[tr].mean(axis=0)
        sd = X[tr].std(axis=0)
        sd[sd == 0] = 1.0
        X = (X - mu) / sd
    return ClassificationData(X[tr], y[tr], X[va], y[va], dtype=dtype)
