"""Fake quantization for quantization-aware training, and bit-level accounting.

Weights use per-tensor symmetric signed quantization whose scale is
recomputed from ``max|w|`` on every forward.  Activations use unsigned
quantization with the range tracked by an exponential moving average of the
batch maximum.  Rounding is half-to-even (``np.rint``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .tensor import Tensor, custom_op

VALID_BITS = (4, 8, 16, 32)
FLOAT_BITS = 32


class QuantizationError(ValueError):
    pass


@dataclass(frozen=True)
class QuantSpec:
    """Bit widths ``<weight_bits, act_bits>`` for one layer; 32 means float."""

    weight_bits: int = 32
    act_bits: int = 32

    def __post_init__(self):
        for bits in (self.weight_bits, self.act_bits):
            if bits not in VALID_BITS:
                raise QuantizationError(f"bit width {bits} not in {VALID_BITS}")

    def __str__(self) -> str:
        return f"<{self.weight_bits},{self.act_bits}>"

    @property
    def is_float(self) -> bool:
        return self.weight_bits == FLOAT_BITS and self.act_bits == FLOAT_BITS

    def to_list(self) -> list:
        return [self.weight_bits, self.act_bits]

    @classmethod
    def parse(cls, value) -> "QuantSpec":
        """Accept ``QuantSpec``, ``[w, a]``, ``"<w,a>"`` or ``"w,a"``."""
        if isinstance(value, QuantSpec):
            return value
        if isinstance(value, str):
            parts = value.strip().strip("<>").split(",")
            if len(parts) != 2:
                raise QuantizationError(f"cannot parse quant spec {value!r}")
            return cls(int(parts[0]), int(parts[1]))
        w, a = value
        return cls(int(w), int(a))


FLOAT = QuantSpec(32, 32)


@dataclass
class FakeQuantizer:
    bits: int
    signed: bool = True
    scale: float | None = None
    tracker: str = "static"  # "static": max of current tensor; "ema": moving max
    ema_decay: float = 0.99
    tracked_max: float | None = None

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise QuantizationError(f"bit width {self.bits} not in {VALID_BITS}")
        if self.tracker not in ("static", "ema"):
            raise QuantizationError(f"unknown range tracker {self.tracker!r}")

    @property
    def passthrough(self) -> bool:
        return self.bits == FLOAT_BITS

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.signed else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1

    @property
    def calibrated(self) -> bool:
        return self.passthrough or (self.scale is not None and self.scale > 0)

    def observe(self, x: np.ndarray) -> None:
        """Update the tracked range from ``x`` and recompute the scale."""
        if self.passthrough:
            return
        if self.signed:
            m = float(np.abs(x).max()) if x.size else 0.0
        else:
            m = max(float(x.max()), 0.0) if x.size else 0.0
        if self.tracker == "ema" and self.tracked_max is not None:
            m = self.ema_decay * self.tracked_max + (1.0 - self.ema_decay) * m
        self.tracked_max = m
        self.scale = m / self.qmax if m > 0 else 1.0

    def bounds(self) -> tuple[float, float]:
        if not self.calibrated:
            raise QuantizationError("quantizer is not calibrated")
        return self.qmin * self.scale, self.qmax * self.scale

    def state(self) -> dict:
        return {
            "bits": self.bits,
            "signed": self.signed,
            "scale": self.scale,
            "tracker": self.tracker,
            "ema_decay": self.ema_decay,
            "tracked_max": self.tracked_max,
        }

    @classmethod
    def from_state(cls, state: dict) -> "FakeQuantizer":
        return cls(**state)


def quantize_array(x: np.ndarray, q: FakeQuantizer) -> np.ndarray:
    """Quantize-dequantize a raw array with the quantizer's current scale."""
    if q.passthrough:
        return x
    if not q.calibrated:
        raise QuantizationError("quantizer is not calibrated")
    levels = np.rint(np.clip(x / q.scale, q.qmin, q.qmax))
    return (levels * q.scale).astype(x.dtype, copy=False)


def ste_backward(upstream_grad: np.ndarray, x: np.ndarray, q: FakeQuantizer) -> np.ndarray:
    """Straight-through gradient: pass inside the clamp range, zero outside."""
    if q.passthrough:
        return upstream_grad
    lo, hi = q.bounds()
    return upstream_grad * ((x >= lo) & (x <= hi))


def quantize_dequantize(x: Tensor, q: FakeQuantizer, calibrate: bool = False) -> Tensor:
    """Fake-quantize ``x``; with ``calibrate`` the quantizer first observes ``x``."""
    if q.passthrough:
        return x
    if calibrate:
        q.observe(x.data)
    elif not q.calibrated:
        raise QuantizationError("uncalibrated quantizer used outside calibration")
    xd = x.data
    out = quantize_array(xd, q)
    return custom_op(out, (x,), lambda g: (ste_backward(g, xd, q),), "quantize_dequantize")


# ---------------------------------------------------------------- accounting


@dataclass(frozen=True)
class LayerCost:
    """Static description of one layer for size/BOPs/latency accounting.

    ``kind`` is ``"conv"``, ``"bn"`` (folded into the preceding conv at
    inference, so zero BOPs) or ``"identity"``.
    """

    name: str
    kind: str
    params: int
    quant: QuantSpec | None
    c_in: int = 0
    c_out: int = 0
    groups: int = 1
    kernel: int = 0
    l_out: int = 0
    nonzero: int | None = None

    @property
    def macs(self) -> int:
        if self.kind != "conv":
            return 0
        return self.l_out * self.c_out * (self.c_in // self.groups) * self.kernel


def _costs(model) -> list[LayerCost]:
    if hasattr(model, "layer_costs"):
        return list(model.layer_costs())
    return list(model)


def layer_bytes(layer: LayerCost, nonzero_only: bool = False) -> float:
    if layer.kind == "identity":
        return 0.0
    if layer.quant is None:
        raise QuantizationError(f"layer {layer.name} has no QuantSpec")
    count = layer.params
    if nonzero_only and layer.nonzero is not None:
        count = layer.nonzero
    return count * layer.quant.weight_bits / 8


def model_size_bytes(model, nonzero_only: bool = False) -> dict:
    """Total and per-layer weight storage in bytes.

    ``model`` is anything exposing ``layer_costs()`` or an iterable of
    :class:`LayerCost`.  With ``nonzero_only`` only nonzero weights are
    counted (sparse value storage).
    """
    per_layer = {}
    for layer in _costs(model):
        per_layer[layer.name] = layer_bytes(layer, nonzero_only)
    return {"total_bytes": sum(per_layer.values()), "per_layer": per_layer}


def bops(layer: LayerCost) -> int:
    """Bit operations: MACs * weight_bits * act_bits."""
    if layer.kind in ("identity", "bn"):
        return 0
    if layer.kind != "conv":
        raise QuantizationError(f"unknown layer kind {layer.kind!r}")
    if layer.quant is None:
        raise QuantizationError(f"layer {layer.name} has no QuantSpec")
    return layer.macs * layer.quant.weight_bits * layer.quant.act_bits


def total_bops(model) -> int:
    return sum(bops(layer) for layer in _costs(model))


def mac_throughput(quant: QuantSpec) -> float:
    """MACs per cycle for a precision pair.

    512 MACs at int8xint4 down to 64 at int16xint16, halving per doubling of
    the operand-bit product; capped at 512.
    """
    return min(512.0, 16384.0 / (quant.weight_bits * quant.act_bits))


def layers_latency(layers: Iterable[LayerCost]) -> float:
    return sum(layer.macs / mac_throughput(layer.quant) for layer in layers if layer.kind == "conv")
