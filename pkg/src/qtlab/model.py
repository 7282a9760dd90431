"""Toy pre-LayerNorm transformer classifier with observer sites.

Layout (``depth`` blocks)::

    x -> embed -> [LN1 -> attn.qkv -> softmax attention -> attn.proj -> +res
                   LN2 -> mlp.fc1 -> GELU -> mlp.fc2 -> +res] * depth
      -> norm -> mean over tokens -> head -> logits

Every linear and LayerNorm layer exposes an input and an output observer
site.  Hooks passed to :meth:`ToyTransformer.forward` see (and may replace)
the tensor flowing through each site; that is how activations are captured
for the outlier loss, observed for calibration and fake-quantized.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError, DomainError
from .outlier import ObserverSite, SiteKind
from .quantizer import QuantConfig
from .tensor import Tensor
from .tensorfile import load_tensor, save_tensor

__all__ = [
    "ToyTransformerConfig",
    "ToyTransformer",
    "ModelCheckpoint",
    "inject_outliers",
    "save_checkpoint",
    "load_checkpoint",
]

INIT_STD = 0.02


@dataclass(frozen=True)
class ToyTransformerConfig:
    depth: int = 3
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    seq_len: int = 16
    input_dim: int = 16
    num_classes: int = 10
    seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("depth", "dim", "heads", "mlp_ratio", "seq_len", "input_dim", "num_classes"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} is not divisible by heads {self.heads}")

    @property
    def hidden(self) -> int:
        return self.dim * self.mlp_ratio

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj) -> "ToyTransformerConfig":
        known = {k: v for k, v in obj.items() if k in cls.__dataclass_fields__}
        unknown = sorted(set(obj) - set(known))
        if unknown:
            raise ConfigurationError(f"unknown model config keys {unknown}")
        return cls(**known)


def _layer_plan(cfg: ToyTransformerConfig):
    """(kind, name, block, in_features, out_features) for every layer in forward order."""
    d, h = cfg.dim, cfg.hidden
    plan = [("linear", "embed", -1, cfg.input_dim, d)]
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        plan += [
            ("norm", f"{pre}.ln1", i, d, d),
            ("linear", f"{pre}.attn.qkv", i, d, 3 * d),
            ("linear", f"{pre}.attn.proj", i, d, d),
            ("norm", f"{pre}.ln2", i, d, d),
            ("linear", f"{pre}.mlp.fc1", i, d, h),
            ("linear", f"{pre}.mlp.fc2", i, h, d),
        ]
    plan += [
        ("norm", "norm", cfg.depth, d, d),
        ("linear", "head", cfg.depth, d, cfg.num_classes),
    ]
    return plan


def init_params(cfg: ToyTransformerConfig) -> dict:
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for kind, name, _, fan_in, fan_out in _layer_plan(cfg):
        if kind == "linear":
            params[f"{name}.weight"] = rng.normal(0.0, INIT_STD, size=(fan_in, fan_out))
            params[f"{name}.bias"] = np.zeros(fan_out)
        else:
            params[f"{name}.weight"] = np.ones(fan_out)
            params[f"{name}.bias"] = np.zeros(fan_out)
    return params


Hook = Callable[[ObserverSite, Tensor], "Tensor | None"]


class ToyTransformer:
    def __init__(self, config: ToyTransformerConfig, params: dict | None = None):
        self.config = config
        self._plan = _layer_plan(config)
        arrays = init_params(config) if params is None else params
        expected = self.param_names()
        if set(arrays) != set(expected):
            missing = sorted(set(expected) - set(arrays))
            extra = sorted(set(arrays) - set(expected))
            raise ConfigurationError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
        self.params = {}
        for name in expected:
            arr = arrays[name].data if isinstance(arrays[name], Tensor) else arrays[name]
            arr = np.array(arr, dtype=np.float64)
            if arr.shape != self._param_shape(name):
                raise DimensionError(f"{name}: shape {arr.shape} != expected {self._param_shape(name)}")
            self.params[name] = Tensor(arr, requires_grad=True)
        self.sites = self._build_sites()

    def _param_shape(self, name: str) -> tuple:
        layer, kind = name.rsplit(".", 1)
        for lk, lname, _, fan_in, fan_out in self._plan:
            if lname == layer:
                if lk == "linear" and kind == "weight":
                    return (fan_in, fan_out)
                return (fan_out,)
        raise ConfigurationError(f"unknown parameter {name}")

    def param_names(self) -> list:
        return [f"{name}.{kind}" for _, name, _, _, _ in self._plan for kind in ("weight", "bias")]

    def linear_layers(self) -> list:
        return [name for kind, name, *_ in self._plan if kind == "linear"]

    def norm_layers(self) -> list:
        return [name for kind, name, *_ in self._plan if kind == "norm"]

    def quantizable_weights(self) -> list:
        """Linear weight matrices; biases and LayerNorm affines stay full precision."""
        return [f"{name}.weight" for name in self.linear_layers()]

    def _build_sites(self) -> list:
        sites = []
        for kind, name, block, *_ in self._plan:
            if kind == "linear":
                kin, kout = SiteKind.LINEAR_INPUT, SiteKind.LINEAR_OUTPUT
            else:
                kin, kout = SiteKind.LAYERNORM_INPUT, SiteKind.LAYERNORM_OUTPUT
            sites.append(ObserverSite(f"{name}:in", kin, block))
            sites.append(ObserverSite(f"{name}:out", kout, block))
        return sites

    @property
    def site_ids(self) -> list:
        return [s.site_id for s in self.sites]

    def clone(self) -> "ToyTransformer":
        return ToyTransformer(self.config, self.state_dict())

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # forward pass

    def forward(self, x, hooks: Iterable[Hook] = (), trace: list | None = None, quantized_sites=frozenset()):
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 3 or x.shape[1:] != (cfg.seq_len, cfg.input_dim):
            raise DimensionError(
                f"batch must have shape (m, {cfg.seq_len}, {cfg.input_dim}), got {x.shape}"
            )
        hooks = tuple(hooks)
        site_map = {s.site_id: s for s in self.sites}

        def observe(site_id, t):
            site = site_map[site_id]
            for hook in hooks:
                r = hook(site, t)
                if r is not None:
                    t = r
            if trace is not None:
                trace.append(("site", site_id, site_id in quantized_sites))
            return t

        def lin(name, t):
            t = observe(f"{name}:in", t)
            t = T.linear(t, self.params[f"{name}.weight"], self.params[f"{name}.bias"])
            return observe(f"{name}:out", t)

        def norm(name, t):
            t = observe(f"{name}:in", t)
            if trace is not None:
                trace.append(("layer_norm", name, False))
            t = T.layer_norm(t, self.params[f"{name}.weight"], self.params[f"{name}.bias"], cfg.ln_eps)
            return observe(f"{name}:out", t)

        h = lin("embed", x)
        for i in range(cfg.depth):
            pre = f"blocks.{i}"
            a = norm(f"{pre}.ln1", h)
            qkv = lin(f"{pre}.attn.qkv", a)
            att = self._attention(qkv, trace)
            h = T.add(h, lin(f"{pre}.attn.proj", att))
            a = norm(f"{pre}.ln2", h)
            f = T.gelu(lin(f"{pre}.mlp.fc1", a))
            h = T.add(h, lin(f"{pre}.mlp.fc2", f))
        a = norm("norm", h)
        pooled = T.mean(a, axis=1)
        return lin("head", pooled)

    __call__ = forward

    def _attention(self, qkv: Tensor, trace) -> Tensor:
        cfg = self.config
        m, s, _ = qkv.shape
        d, nh = cfg.dim, cfg.heads
        dh = d // nh

        def heads(t):
            return T.transpose(T.reshape(t, (m, s, nh, dh)), (0, 2, 1, 3))

        q = heads(qkv[:, :, :d])
        k = heads(qkv[:, :, d : 2 * d])
        v = heads(qkv[:, :, 2 * d :])
        scores = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        if trace is not None:
            trace.append(("softmax", None, False))
        out = T.matmul(T.softmax(scores, axis=-1), v)
        return T.reshape(T.transpose(out, (0, 2, 1, 3)), (m, s, d))

    def predict(self, x, batch_size: int = 500) -> np.ndarray:
        return predict(self, x, batch_size)


def predict(model, x, batch_size: int = 500) -> np.ndarray:
    """Arg-max class for each sample, evaluated in fixed-order chunks."""
    x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    preds = [np.argmax(model.forward(x[i : i + batch_size]).data, axis=-1) for i in range(0, len(x), batch_size)]
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def inject_outliers(
    model: ToyTransformer,
    magnitude: float,
    fraction: float,
    seed: int = 0,
    targets: Iterable[str] = ("value",),
) -> ToyTransformer:
    """Plant channel-wise activation outliers while keeping the function intact.

    For every block, ``max(1, round(fraction * dim))`` random channels are
    scaled up by ``magnitude`` at the producing layer and the consuming layer's
    matching input rows are divided by it.  Targets:

    ``"value"``
        value channels of ``attn.qkv``; compensated in ``attn.proj``.
    ``"norm"``
        LayerNorm affine channels (``ln1``, ``ln2``); compensated in
        ``attn.qkv`` / ``mlp.fc1``.

    Both pairings are exact because attention mixing and matrix products are
    linear in the scaled channel.
    """
    if not magnitude >= 1.0:
        raise DomainError(f"magnitude must be >= 1, got {magnitude}")
    if not 0.0 < fraction <= 0.05:
        raise DomainError(f"fraction must lie in (0, 0.05], got {fraction}")
    targets = tuple(targets)
    bad = sorted(set(targets) - {"value", "norm"})
    if bad:
        raise ConfigurationError(f"unknown injection targets {bad}")
    out = model.clone()
    if magnitude == 1.0:
        return out
    cfg = model.config
    d = cfg.dim
    n = max(1, int(round(fraction * d)))
    rng = np.random.default_rng(seed)
    p = out.params
    for i in range(cfg.depth):
        pre = f"blocks.{i}"
        if "value" in targets:
            ch = np.sort(rng.choice(d, size=n, replace=False))
            p[f"{pre}.attn.qkv.weight"].data[:, 2 * d + ch] *= magnitude
            p[f"{pre}.attn.qkv.bias"].data[2 * d + ch] *= magnitude
            p[f"{pre}.attn.proj.weight"].data[ch, :] /= magnitude
        if "norm" in targets:
            for ln, consumer in (("ln1", "attn.qkv"), ("ln2", "mlp.fc1")):
                ch = np.sort(rng.choice(d, size=n, replace=False))
                p[f"{pre}.{ln}.weight"].data[ch] *= magnitude
                p[f"{pre}.{ln}.bias"].data[ch] *= magnitude
                p[f"{pre}.{consumer}.weight"].data[ch, :] /= magnitude
    return out


@dataclass
class ModelCheckpoint:
    config: ToyTransformerConfig
    params: dict
    quant: QuantConfig | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: ToyTransformer, quant=None, **metadata) -> "ModelCheckpoint":
        return cls(model.config, model.state_dict(), quant, dict(metadata))

    def to_model(self) -> ToyTransformer:
        model = ToyTransformer(self.config, self.params)
        if self.quant is not None:
            names = set(model.quantizable_weights()) | set(model.site_ids)
            unknown = sorted((set(self.quant.weights) | set(self.quant.activations)) - names)
            if unknown:
                raise ConfigurationError(f"checkpoint specs reference unknown names {unknown}")
        return model


def save_checkpoint(ckpt: ModelCheckpoint, directory) -> Path:
    directory = Path(directory)
    (directory / "weights").mkdir(parents=True, exist_ok=True)
    index = {}
    for name in sorted(ckpt.params):
        rel = f"weights/{name}.bin"
        save_tensor(directory / rel, ckpt.params[name])
        index[name] = rel
    manifest = {
        "config": ckpt.config.to_json(),
        "weights": index,
        "quant_specs": ckpt.quant.to_json() if ckpt.quant is not None else None,
        "metadata": ckpt.metadata,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory) -> ModelCheckpoint:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise ConfigurationError(f"no manifest.json in {directory}") from None
    config = ToyTransformerConfig.from_json(manifest["config"])
    params = {name: load_tensor(directory / rel).data for name, rel in manifest["weights"].items()}
    quant = manifest.get("quant_specs")
    ckpt = ModelCheckpoint(config, params, QuantConfig.from_json(quant) if quant else None, manifest.get("metadata", {}))
    ckpt.to_model()  # validates names and shapes
    return ckpt
