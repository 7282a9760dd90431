"""Synthetic sequence-classification task.

Each class owns a motif of ``motif_len`` prototype tokens.  A sample of class
``c`` is Gaussian noise in which the motif tokens of ``c`` are planted (scaled
by ``signal``) at random positions, plus a weaker decoy motif borrowed from a
different class.  Telling the true motif from the decoy needs more than a
bag-of-tokens average, and the noise keeps accuracy below 100% so that
quantization damage is visible.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, DataError
from .tensorfile import load_tensor

__all__ = ["TaskConfig", "Dataset", "make_dataset", "eval_mask", "load_dataset"]


@dataclass(frozen=True)
class TaskConfig:
    n_samples: int = 5000
    seq_len: int = 16
    input_dim: int = 16
    num_classes: int = 10
    motif_len: int = 3
    signal: float = 1.0
    decoy: float = 0.6
    noise: float = 1.0
    eval_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < self.num_classes:
            raise ConfigurationError("need at least one sample per class")
        if 2 * self.motif_len > self.seq_len:
            raise ConfigurationError("motif and decoy do not fit in the sequence")
        if not 0.0 < self.eval_fraction < 1.0:
            raise ConfigurationError("eval_fraction must lie in (0, 1)")

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "TaskConfig":
        unknown = sorted(set(obj) - set(cls.__dataclass_fields__))
        if unknown:
            raise ConfigurationError(f"unknown data config keys {unknown}")
        return cls(**obj)


@dataclass
class Dataset:
    x: np.ndarray  # (n, seq_len, input_dim)
    y: np.ndarray  # (n,) integer labels
    num_classes: int
    train_idx: np.ndarray
    eval_idx: np.ndarray

    @property
    def x_train(self) -> np.ndarray:
        return self.x[self.train_idx]

    @property
    def y_train(self) -> np.ndarray:
        return self.y[self.train_idx]

    @property
    def x_eval(self) -> np.ndarray:
        return self.x[self.eval_idx]

    @property
    def y_eval(self) -> np.ndarray:
        return self.y[self.eval_idx]

    def calibration_batches(self, batches: int = 10, batch_size: int = 100) -> list:
        """The first ``batches * batch_size`` training samples, in order, as batches."""
        need = batches * batch_size
        if need > len(self.train_idx):
            raise DataError(f"calibration needs {need} samples, training split has {len(self.train_idx)}")
        xs = self.x_train[:need]
        return [xs[i * batch_size : (i + 1) * batch_size] for i in range(batches)]


def eval_mask(n: int, seed: int, fraction: float) -> np.ndarray:
    """Seed-stable hash split: sample ``i`` is held out when its hash bucket falls below ``fraction``."""
    buckets = np.empty(n, dtype=np.float64)
    for i in range(n):
        h = hashlib.blake2b(f"{seed}:{i}".encode(), digest_size=8).digest()
        buckets[i] = int.from_bytes(h, "little") / 2.0**64
    return buckets < fraction


def make_dataset(cfg: TaskConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    k, L, s, d = cfg.num_classes, cfg.motif_len, cfg.seq_len, cfg.input_dim
    motifs = rng.normal(size=(k, L, d))
    y = np.arange(cfg.n_samples) % k
    rng.shuffle(y)
    x = rng.normal(scale=cfg.noise, size=(cfg.n_samples, s, d))
    for i in range(cfg.n_samples):
        pos = rng.permutation(s)[: 2 * L]
        decoy = (y[i] + 1 + rng.integers(k - 1)) % k
        x[i, pos[:L]] += cfg.signal * motifs[y[i]]
        x[i, pos[L:]] += cfg.decoy * motifs[decoy]
    mask = eval_mask(cfg.n_samples, cfg.seed, cfg.eval_fraction)
    return Dataset(x, y, k, np.flatnonzero(~mask), np.flatnonzero(mask))


def load_dataset(x_path, y_path, num_classes: int, seed: int = 0, eval_fraction: float = 0.2) -> Dataset:
    """Wrap user-provided tensor files (inputs ``(n, seq, dim)``, integer-valued labels ``(n,)``)."""
    x = load_tensor(x_path).data
    y_raw = load_tensor(y_path).data
    if x.ndim != 3 or y_raw.shape != (x.shape[0],):
        raise DataError(f"inputs {x.shape} and labels {y_raw.shape} do not line up")
    y = y_raw.astype(np.int64)
    if np.any(y != y_raw) or np.any((y < 0) | (y >= num_classes)):
        raise DataError("labels must be integers in [0, num_classes)")
    mask = eval_mask(len(y), seed, eval_fraction)
    return Dataset(x, y, num_classes, np.flatnonzero(~mask), np.flatnonzero(mask))
