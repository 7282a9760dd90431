"""Task loss, outlier-driven loss and their blend.

The outlier-driven loss averages, over observer sites and batch samples, the
per-sample ratio::

    (max|A| - median|A|) / std(A)

where ``A`` is the full activation of one sample at one site.  The blended
objective is ``(1 - alpha) * cls + alpha * out`` with ``alpha`` decayed over
fine-tuning by :func:`step_alpha`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DegenerateActivationError, DimensionError, DomainError
from .tensor import Tensor

__all__ = [
    "SiteKind",
    "ObserverSite",
    "Schedule",
    "OutlierLossConfig",
    "classification_loss",
    "outlier_terms",
    "outlier_loss",
    "total_loss",
    "step_alpha",
    "one_hot",
]


class SiteKind(str, enum.Enum):
    LINEAR_INPUT = "LinearInput"
    LINEAR_OUTPUT = "LinearOutput"
    LAYERNORM_INPUT = "LayerNormInput"
    LAYERNORM_OUTPUT = "LayerNormOutput"


@dataclass(frozen=True)
class ObserverSite:
    site_id: str
    kind: SiteKind
    block_index: int


class Schedule(str, enum.Enum):
    CONSTANT = "constant"
    LINEAR = "linear"
    COSINE = "cosine"


@dataclass
class OutlierLossConfig:
    alpha: float = 0.5
    schedule: Schedule = Schedule.LINEAR
    total_steps: int = 0
    sites: object = "all"  # "all" or a list of site ids

    def __post_init__(self):
        self.schedule = Schedule(self.schedule)
        if not 0.0 <= self.alpha <= 1.0:
            raise DomainError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.schedule is not Schedule.CONSTANT and self.total_steps <= 0:
            raise ConfigurationError("decay schedules need total_steps > 0")
        if self.sites != "all" and not isinstance(self.sites, (list, tuple)):
            raise ConfigurationError(f"sites must be 'all' or a list of site ids, got {self.sites!r}")

    def select(self, site_ids: Sequence[str]) -> list:
        if self.sites == "all":
            return list(site_ids)
        unknown = sorted(set(self.sites) - set(site_ids))
        if unknown:
            raise ConfigurationError(f"unknown observer sites {unknown}")
        keep = set(self.sites)
        return [s for s in site_ids if s in keep]

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "schedule": self.schedule.value,
            "total_steps": self.total_steps,
            "sites": self.sites if self.sites == "all" else list(self.sites),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "OutlierLossConfig":
        try:
            return cls(
                alpha=float(obj.get("alpha", 0.5)),
                schedule=obj.get("schedule", "linear"),
                total_steps=int(obj.get("total_steps", 0)),
                sites=obj.get("sites", "all"),
            )
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def classification_loss(logits, labels) -> Tensor:
    """Mean cross-entropy of softmax(logits) against one-hot ``labels``."""
    logits = T.as_tensor(logits)
    labels = labels.data if isinstance(labels, Tensor) else np.asarray(labels, dtype=np.float64)
    if logits.ndim != 2 or logits.shape != labels.shape:
        raise DimensionError(f"logits {logits.shape} and labels {labels.shape} must both be m x k")
    m = logits.shape[0]
    if m < 1:
        raise DimensionError("classification loss needs at least one sample")
    picked = T.mul(T.log_softmax(logits, axis=-1), Tensor._wrap(labels))
    return T.div(T.neg(T.tsum(picked)), float(m))


def _as_site_map(activations) -> list:
    if isinstance(activations, Mapping):
        return list(activations.items())
    return [(j, a) for j, a in enumerate(activations)]


def outlier_terms(activations) -> dict:
    """Per-site tensors of shape (m,) holding each sample's outlier ratio.

    ``activations`` maps site id to a tensor whose leading axis is the batch;
    a plain sequence is accepted too and keyed by position.
    """
    terms = {}
    for site_id, a in _as_site_map(activations):
        a = T.as_tensor(a)
        m = a.shape[0]
        flat = T.reshape(a, (m, -1))
        sd = T.stddev(flat, axis=-1)
        if np.any(sd.data <= 0):
            raise DegenerateActivationError(site_id)
        num = T.sub(T.max_abs(flat, axis=-1), T.median_abs(flat, axis=-1))
        terms[site_id] = T.div(num, sd)
    return terms


def outlier_loss(activations) -> Tensor:
    """Mean over sites and samples of ``(max|A| - median|A|) / std(A)``."""
    terms = outlier_terms(activations)
    if not terms:
        raise DomainError("outlier loss needs at least one observer site")
    total = None
    count = 0
    for t in terms.values():
        s = T.tsum(t)
        total = s if total is None else T.add(total, s)
        count += t.size
    return T.div(total, float(count))


def total_loss(cls, out, alpha: float) -> Tensor:
    """``(1 - alpha) * cls + alpha * out``; the endpoints return one operand unchanged."""
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    cls, out = T.as_tensor(cls), T.as_tensor(out)
    if alpha == 0.0:
        return cls
    if alpha == 1.0:
        return out
    return T.add(T.mul(cls, 1.0 - alpha), T.mul(out, alpha))


def step_alpha(config: OutlierLossConfig, step: int) -> float:
    if step < 0:
        raise DomainError(f"step must be non-negative, got {step}")
    if config.schedule is Schedule.CONSTANT:
        return config.alpha
    frac = step / config.total_steps
    if config.schedule is Schedule.LINEAR:
        return config.alpha * max(0.0, 1.0 - frac)
    return config.alpha * (1.0 + math.cos(math.pi * min(1.0, frac))) / 2.0
