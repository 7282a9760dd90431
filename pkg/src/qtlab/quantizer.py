"""Symmetric uniform fake quantization.

Values are mapped to integer codes ``round_half_even(x / scale)`` clamped to
``[-qmax, qmax]`` with ``qmax = 2**(bits - 1) - 1`` and mapped back by
multiplying with ``scale``.  The zero-point is always 0 and scales are per
tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigurationError, DomainError
from .tensor import Tensor

__all__ = [
    "QuantSpec",
    "QuantizedTensor",
    "QuantConfig",
    "QuantizedModel",
    "scale_from_range",
    "fake_quant",
    "quantize",
    "dequantize",
    "minmax_weight_specs",
    "quantize_model",
]

MIN_BITS, MAX_BITS = 2, 16


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scale: float

    def __post_init__(self):
        if not isinstance(self.bits, (int, np.integer)) or not MIN_BITS <= self.bits <= MAX_BITS:
            raise DomainError(f"bit width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {self.bits!r}")
        if not (math.isfinite(self.scale) and self.scale > 0):
            raise DomainError(f"scale must be positive and finite, got {self.scale!r}")
        object.__setattr__(self, "bits", int(self.bits))
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def clip(self) -> float:
        """Largest representable magnitude, ``qmax * scale``."""
        return self.qmax * self.scale

    def to_json(self) -> dict:
        return {"bits": self.bits, "scale": self.scale}

    @classmethod
    def from_json(cls, obj: Mapping) -> "QuantSpec":
        try:
            return cls(int(obj["bits"]), float(obj["scale"]))
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed quant spec {obj!r}: {exc}") from None


def scale_from_range(r: float, bit_width: int) -> QuantSpec:
    """Spec whose largest code ``qmax`` maps exactly onto the range ``r``."""
    r = float(r)
    if not math.isfinite(r) or r <= 0:
        raise DomainError(f"quantization range must be positive and finite, got {r}")
    qmax = 2 ** (int(bit_width) - 1) - 1
    if qmax < 1:
        raise DomainError(f"bit width must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bit_width!r}")
    return QuantSpec(int(bit_width), r / qmax)


def _codes(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    # np.rint rounds half to even
    codes = np.rint(x / spec.scale)
    return np.clip(codes, -spec.qmax, spec.qmax, out=codes)


def fake_quant(t, spec: QuantSpec):
    """Quantize-dequantize ``t``.  Returns the same kind of object it was given."""
    if isinstance(t, Tensor):
        return Tensor._wrap(_codes(t.data, spec) * spec.scale)
    return _codes(np.asarray(t, dtype=np.float64), spec) * spec.scale


@dataclass(frozen=True)
class QuantizedTensor:
    codes: np.ndarray
    spec: QuantSpec

    @property
    def shape(self) -> tuple:
        return self.codes.shape


def quantize(t, spec: QuantSpec) -> QuantizedTensor:
    data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    return QuantizedTensor(_codes(data, spec).astype(np.int32), spec)


def dequantize(q: QuantizedTensor) -> Tensor:
    return Tensor._wrap(q.codes.astype(np.float64) * q.spec.scale)


@dataclass
class QuantConfig:
    """Per-tensor specs for a whole model: weights by name, activations by site id."""

    weights: dict = field(default_factory=dict)
    activations: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "weights": {k: v.to_json() for k, v in sorted(self.weights.items())},
            "activations": {k: v.to_json() for k, v in sorted(self.activations.items())},
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "QuantConfig":
        return cls(
            {k: QuantSpec.from_json(v) for k, v in obj.get("weights", {}).items()},
            {k: QuantSpec.from_json(v) for k, v in obj.get("activations", {}).items()},
        )


def minmax_weight_specs(model, bits: int) -> dict:
    """Min-max specs for every quantizable weight of ``model``.

    An all-zero weight gets scale 1.0: any positive scale leaves zeros fixed.
    """
    specs = {}
    for name in model.quantizable_weights():
        r = float(np.max(np.abs(model.params[name].data)))
        specs[name] = scale_from_range(r, bits) if r > 0 else QuantSpec(bits, 1.0)
    return specs


class QuantizedModel:
    """A model whose weights are fake-quantized and whose observer sites quantize activations.

    Softmax and LayerNorm arithmetic run at full precision; only tensors
    passing through observer sites are rounded.
    """

    def __init__(self, model, qconfig: QuantConfig, stats=None):
        self.fp_model = model
        self.qconfig = qconfig
        self.stats = stats
        self.model = model.clone()
        for name, spec in qconfig.weights.items():
            p = self.model.params[name]
            p.data = fake_quant(p.data, spec)
        self._specs = dict(qconfig.activations)

    @property
    def config(self):
        return self.model.config

    @property
    def sites(self):
        return self.model.sites

    def _hook(self, site, t):
        spec = self._specs.get(site.site_id)
        if spec is None:
            return t
        return fake_quant(t, spec)

    def forward(self, x, hooks=(), trace=None):
        """Run the quantized forward pass.

        ``hooks`` run before the site's quantizer and see full-precision
        values arriving at that site.
        """
        return self.model.forward(x, hooks=tuple(hooks) + (self._hook,), trace=trace, quantized_sites=set(self._specs))

    __call__ = forward


def quantize_model(model, qconfig: QuantConfig, stats=None) -> QuantizedModel:
    """Fake-quantize every linear weight and every observer-site activation of ``model``.

    Raises :class:`ConfigurationError` when an included weight or site lacks a
    spec, or when a spec names something the model does not have.
    """
    wanted = set(model.quantizable_weights())
    missing = sorted(wanted - set(qconfig.weights))
    if missing:
        raise ConfigurationError(f"missing weight specs for {missing}")
    unknown = sorted(set(qconfig.weights) - wanted)
    if unknown:
        raise ConfigurationError(f"specs for non-quantizable or unknown weights {unknown}")
    site_ids = {s.site_id for s in model.sites}
    missing = sorted(site_ids - set(qconfig.activations))
    if missing:
        raise ConfigurationError(f"missing activation specs for sites {missing}")
    unknown = sorted(set(qconfig.activations) - site_ids)
    if unknown:
        raise ConfigurationError(f"activation specs for unknown sites {unknown}")
    return QuantizedModel(model, qconfig, stats)
