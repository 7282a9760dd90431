"""Fine-tuning with the blended task/outlier objective, and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .errors import ConfigurationError, DataError, TrainingDiverged
from .model import ModelCheckpoint, ToyTransformer, predict
from .outlier import (
    OutlierLossConfig,
    Schedule,
    classification_loss,
    one_hot,
    outlier_terms,
    step_alpha,
    total_loss,
)
from . import tensor as T
from .quantizer import QuantConfig, QuantizedModel, quantize_model
from .tensor import Tape

logger = logging.getLogger(__name__)

__all__ = [
    "SGD",
    "Adam",
    "OptimizerConfig",
    "TrainConfig",
    "FinetuneResult",
    "EvalResult",
    "finetune",
    "evaluate",
    "batch_losses",
    "write_log",
]


class SGD:
    def __init__(self, params: dict, lr: float, momentum: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def build(self, params: dict, lr: float):
        if self.kind == "adam":
            return Adam(params, lr, self.beta1, self.beta2, self.eps)
        if self.kind == "sgd":
            return SGD(params, lr, self.momentum)
        raise ConfigurationError(f"unknown optimizer {self.kind!r}")


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    outlier: OutlierLossConfig = field(default_factory=lambda: OutlierLossConfig(0.0, Schedule.CONSTANT))
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0:
            raise ConfigurationError("steps must be >= 0 and batch_size > 0")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class FinetuneResult:
    checkpoint: ModelCheckpoint
    log: list
    model: ToyTransformer
    checkpoints: dict = field(default_factory=dict)  # step -> weights before that step's update


def _batch_order(n: int, steps: int, batch_size: int, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    pos = 0
    for _ in range(steps):
        if pos + batch_size > n:
            perm = rng.permutation(n)
            pos = 0
        yield perm[pos : pos + batch_size]
        pos += batch_size


def batch_losses(model, xb, yb, num_classes: int, alpha: float, sites=None, record: bool = False):
    """Forward one batch; returns (total, cls, out, per-site metric dict).

    ``sites`` limits the outlier loss to those site ids (default all).  With
    ``record`` the forward pass is taped for a later backward.
    """
    keep = set(sites) if sites is not None else None
    captured = {}

    def capture(site, t):
        if keep is None or site.site_id in keep:
            captured[site.site_id] = t

    logits = model.forward(xb, hooks=(capture,))
    cls = classification_loss(logits, one_hot(yb, num_classes))
    if alpha == 0.0 or not record:
        captured = {k: v.detach() for k, v in captured.items()}
    terms = outlier_terms(captured)
    total_count = sum(t.size for t in terms.values())
    out = None
    for t in terms.values():
        s = T.tsum(t)
        out = s if out is None else T.add(out, s)
    out = T.div(out, float(total_count))
    metric = {k: float(v.data.mean()) for k, v in terms.items()}
    return total_loss(cls, out, alpha), cls, out, metric


def finetune(model: ToyTransformer, data, config: TrainConfig) -> FinetuneResult:
    """Train a copy of ``model`` on the training split with the blended objective.

    Each log record holds the step, alpha, the three losses and the per-site
    ``(max - median) / std`` averaged over the batch.  Raises
    :class:`TrainingDiverged` (carrying the last good checkpoint) when the
    loss turns non-finite.
    """
    if data.x.shape[1:] != (model.config.seq_len, model.config.input_dim):
        raise DataError(f"data shape {data.x.shape[1:]} does not match the model input")
    model = model.clone()
    sites = config.outlier.select(model.site_ids)
    opt = config.optimizer.build(model.params, config.learning_rate)
    xs, ys = data.x_train, data.y_train
    if len(ys) == 0:
        raise DataError("empty training split")
    log, checkpoints = [], {}
    last_good = ModelCheckpoint.from_model(model, steps=0)
    with np.errstate(over="ignore", invalid="ignore"):
        for step, idx in enumerate(_batch_order(len(ys), config.steps, config.batch_size, config.seed)):
            alpha = step_alpha(config.outlier, step)
            if config.checkpoint_every and step % config.checkpoint_every == 0:
                checkpoints[step] = model.state_dict()
            model.zero_grad()
            with Tape() as tape:
                total, cls, out, metric = batch_losses(model, xs[idx], ys[idx], data.num_classes, alpha, sites, record=True)
                values = (total.item(), cls.item(), out.item())
                if not all(math.isfinite(v) for v in values):
                    raise TrainingDiverged(step, last_good, log)
                tape.backward(total)
            log.append({
                "step": step,
                "alpha": alpha,
                "loss_total": values[0],
                "loss_cls": values[1],
                "loss_out": values[2],
                "mean_site_metric": float(np.mean(list(metric.values()))),
                "site_metric": metric,
            })
            if config.eval_every and (step + 1) % config.eval_every == 0:
                log[-1]["eval_accuracy"] = evaluate(model, data, decompose=False).accuracy
            opt.step()
            if not all(np.all(np.isfinite(p.data)) for p in model.params.values()):
                raise TrainingDiverged(step, last_good, log)
            last_good = ModelCheckpoint.from_model(model, steps=step + 1, final_alpha=alpha)
    final_alpha = step_alpha(config.outlier, config.steps)
    ckpt = ModelCheckpoint.from_model(model, steps=config.steps, final_alpha=final_alpha)
    return FinetuneResult(ckpt, log, model, checkpoints)


def write_log(path, log: list) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return path


@dataclass
class EvalResult:
    accuracy: float
    predictions: np.ndarray
    decompositions: dict = field(default_factory=dict)


def evaluate(model, data, quant: QuantConfig | None = None, *, split: str = "eval",
             decompose: bool = True, kl: bool = True, decompose_samples: int | None = None) -> EvalResult:
    """Top-1 accuracy on a split; quantized runs also return per-site error splits.

    ``model`` may be a plain model (optionally with ``quant`` specs) or an
    already quantized one.  Accuracy always covers the whole split; the error
    splits use the first ``decompose_samples`` samples when given.
    """
    if quant is not None:
        if isinstance(model, QuantizedModel):
            raise ConfigurationError("model is already quantized")
        model = quantize_model(model, quant)
    if split == "eval":
        x, y = data.x_eval, data.y_eval
    elif split == "train":
        x, y = data.x_train, data.y_train
    else:
        raise ConfigurationError(f"unknown split {split!r}")
    if len(y) == 0:
        raise DataError(f"empty {split} split")
    decomps = {}
    if isinstance(model, QuantizedModel) and decompose:
        specs = model.qconfig.activations
        chunks = {}

        limit = len(y) if decompose_samples is None else int(decompose_samples)
        seen = [0]

        def hook(site, t):
            if seen[0] < limit:
                chunks.setdefault(site.site_id, []).append(t.data[: limit - seen[0]])

        def count(site, t):
            if site.site_id == model.sites[-1].site_id:
                seen[0] += t.shape[0]

        preds = predict_with_hooks(model, x, (hook, count))
        for site in model.sites:
            arr = np.concatenate([c.reshape(-1) for c in chunks[site.site_id]])
            decomps[site.site_id] = analysis.decompose(arr, specs[site.site_id], site.site_id, kl=kl)
    else:
        preds = predict(model, x)
    return EvalResult(float(np.mean(preds == y)), preds, decomps)


def predict_with_hooks(model, x, hooks, batch_size: int = 500) -> np.ndarray:
    preds = [np.argmax(model.forward(x[i : i + batch_size], hooks=hooks).data, axis=-1) for i in range(0, len(x), batch_size)]
    return np.concatenate(preds)
