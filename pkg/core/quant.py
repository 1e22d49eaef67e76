"""
Symmetric per-tensor fake quantization with a clipped straight-through estimator.

Values are quantized to the integer grid ``[-(2^(b-1)-1), 2^(b-1)-1]`` times a
per-tensor scale and immediately dequantized, so training stays in float64.
``bits == 32`` is the full-precision sentinel and maps to the identity.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

from core.errors import QuantizationError
from core.tensor import Node, const, forward_op, register_op

logger = logging.getLogger(__name__)

FULL_PRECISION = 32
SUPPORTED_BITS = tuple(range(2, 9)) + (FULL_PRECISION,)


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    scale: float = 1.0
    zero_point: int = 0

    def __post_init__(self):
        if self.bits not in SUPPORTED_BITS:
            raise QuantizationError(f"unsupported bit-width {self.bits}; expected 2..8 or 32")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise QuantizationError(f"scale must be positive and finite, got {self.scale}")
        if self.zero_point != 0:
            raise QuantizationError("symmetric quantization requires zero_point == 0")
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def clip_hi(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def clip_lo(self) -> int:
        return -self.clip_hi

    @property
    def is_identity(self) -> bool:
        return self.bits == FULL_PRECISION

    @classmethod
    def identity(cls) -> "QuantSpec":
        return cls(FULL_PRECISION)

    @classmethod
    def from_max(cls, max_abs: float, bits: int) -> "QuantSpec":
        if bits == FULL_PRECISION:
            return cls.identity()
        clip_hi = 2 ** (bits - 1) - 1
        return cls(bits, float(max_abs) / clip_hi if max_abs > 0 else 1.0)

    def to_dict(self) -> dict:
        return {"bits": self.bits, "scale": self.scale, "zero_point": self.zero_point}

    @classmethod
    def from_dict(cls, data: Mapping) -> "QuantSpec":
        return cls(int(data["bits"]), float(data["scale"]), int(data.get("zero_point", 0)))


def _check_bits(bits: int) -> None:
    if bits < 2:
        raise QuantizationError(f"bit-width must be at least 2, got {bits}")
    if bits not in SUPPORTED_BITS:
        raise QuantizationError(f"unsupported bit-width {bits}; expected 2..8 or 32")


def calibrate(x, bits: int) -> QuantSpec:
    """Scale so that max|x| lands on the top integer level."""
    _check_bits(bits)
    values = x.value if isinstance(x, Node) else np.asarray(x, dtype=np.float64)
    if values.size == 0:
        raise QuantizationError("cannot calibrate an empty tensor")
    return QuantSpec.from_max(float(np.max(np.abs(values))), bits)


# ── Fake quantization op ────────────────────────────────────────────────

def _fake_quantize_forward(x, scale, lo, hi):
    return scale * np.clip(round_half_away(x / scale), lo, hi)


def _fake_quantize_vjp(node, g):
    x = node.parents[0].value
    ratio = x / node.attrs["scale"]
    mask = (ratio >= node.attrs["lo"]) & (ratio <= node.attrs["hi"])
    return (g * const(mask),)


register_op("fake_quantize", _fake_quantize_forward, _fake_quantize_vjp)


def fake_quantize(x: Node, spec: QuantSpec) -> Node:
    """Quantize-dequantize ``x``; the gradient passes unchanged inside the clip range."""
    if spec.is_identity:
        return x
    return forward_op(
        "fake_quantize",
        [x],
        {"scale": spec.scale, "lo": float(spec.clip_lo), "hi": float(spec.clip_hi)},
    )


def fake_quantize_array(x: np.ndarray, spec: QuantSpec) -> np.ndarray:
    if spec.is_identity:
        return np.asarray(x, dtype=np.float64)
    return _fake_quantize_forward(np.asarray(x, dtype=np.float64), spec.scale, spec.clip_lo, spec.clip_hi)


# ── Model-level calibration ─────────────────────────────────────────────

ActivationRanges = Callable[[np.ndarray, Mapping[str, QuantSpec]], Mapping[str, float]]


def weight_key(name: str) -> str:
    return f"w:{name}"


def activation_key(site: str) -> str:
    return f"a:{site}"


def quantize_model(
    weights: Mapping[str, np.ndarray],
    bits: int,
    recalibrate: bool = True,
    *,
    activation_sites: Sequence[str] = (),
    activation_ranges: Optional[ActivationRanges] = None,
    calibration_batch: Optional[np.ndarray] = None,
    previous: Optional[Mapping[str, QuantSpec]] = None,
) -> Dict[str, QuantSpec]:
    """One spec per weight tensor (``w:<name>``) and per activation site (``a:<site>``).

    With ``recalibrate`` false, ``previous`` specs are kept where present.
    Activation scales come from ``activation_ranges``, which returns max|a| per
    site over the calibration batch given the fresh weight specs.
    """
    _check_bits(bits)
    previous = dict(previous or {})
    specs: Dict[str, QuantSpec] = {}
    for name, w in weights.items():
        key = weight_key(name)
        if not recalibrate and key in previous:
            specs[key] = previous[key]
        else:
            specs[key] = calibrate(w, bits)

    if not activation_sites:
        return specs
    keys = [activation_key(s) for s in activation_sites]
    if bits == FULL_PRECISION:
        specs.update({k: QuantSpec.identity() for k in keys})
        return specs
    if not recalibrate and all(k in previous for k in keys):
        specs.update({k: previous[k] for k in keys})
        return specs
    if calibration_batch is None or len(calibration_batch) == 0:
        raise QuantizationError("activation calibration requested with an empty calibration batch")
    if activation_ranges is None:
        raise QuantizationError("activation calibration requires an activation range callback")
    maxima = activation_ranges(calibration_batch, specs)
    for site, key in zip(activation_sites, keys):
        specs[key] = QuantSpec.from_max(float(maxima[site]), bits)
    logger.debug("calibrated %d-bit specs for %d weights and %d activation sites",
                 bits, len(weights), len(keys))
    return specs
