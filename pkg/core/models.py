"""
Small CNNs with named layer taps, evaluated as fake-quantized bit-width variants.

A :class:`ModelDef` is a plain description; weights live in an ensemble
state (see ``core/curriculum.py``) and a :class:`VariantHandle` pairs that
state with one bit-width.
"""

import logging
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np

from core import ops
from core.errors import ConfigError, DataError, QuantizationError, ShapeError
from core.quant import QuantSpec, activation_key, fake_quantize, quantize_model, weight_key
from core.tensor import Node, const, no_grad

if TYPE_CHECKING:
    from core.curriculum import EnsembleState

logger = logging.getLogger(__name__)

GAP_SITE = "gap"


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str  # "conv" | "gap" | "dense"
    out_channels: int = 0
    kernel: int = 3
    pool: bool = False


@dataclass(frozen=True)
class ModelDef:
    name: str
    input_shape: Tuple[int, int, int]
    num_classes: int
    layers: Tuple[LayerDef, ...]
    taps: Tuple[str, ...] = field(default=())

    def __post_init__(self):
        conv_names = [l.name for l in self.layers if l.kind == "conv"]
        if len(set(self.taps)) != len(self.taps):
            raise ConfigError(f"duplicate taps {self.taps}")
        unknown = [t for t in self.taps if t not in conv_names]
        if unknown:
            raise ConfigError(f"taps {unknown} are not conv blocks of {self.name}")

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        shapes: Dict[str, Tuple[int, ...]] = {}
        channels = self.input_shape[0]
        for layer in self.layers:
            if layer.kind == "conv":
                shapes[f"{layer.name}.weight"] = (layer.out_channels, channels, layer.kernel, layer.kernel)
                shapes[f"{layer.name}.bias"] = (layer.out_channels,)
                channels = layer.out_channels
            elif layer.kind == "dense":
                shapes[f"{layer.name}.weight"] = (channels, self.num_classes)
                shapes[f"{layer.name}.bias"] = (self.num_classes,)
        return shapes

    @property
    def weight_names(self) -> Tuple[str, ...]:
        """Tensors that get a weight spec; biases stay full precision."""
        return tuple(n for n in self.param_shapes() if n.endswith(".weight"))

    @property
    def activation_sites(self) -> Tuple[str, ...]:
        sites = [l.name for l in self.layers if l.kind == "conv"]
        if any(l.kind == "gap" for l in self.layers):
            sites.append(GAP_SITE)
        return tuple(sites)

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """He-normal weights, zero biases."""
        params = {}
        for name, shape in self.param_shapes().items():
            if name.endswith(".bias"):
                params[name] = np.zeros(shape)
            else:
                fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        return params


_ARCHITECTURES: Dict[str, Tuple[Tuple[int, bool], ...]] = {
    "tinycnn-s": ((16, True), (32, True), (64, False)),
    "tinycnn-m": ((32, True), (64, True), (128, False), (128, False)),
}


def architectures() -> Tuple[str, ...]:
    return tuple(_ARCHITECTURES)


def build_model(
    architecture: str,
    num_classes: int = 4,
    input_shape: Tuple[int, int, int] = (3, 32, 32),
    taps: Optional[Sequence[str]] = None,
) -> ModelDef:
    if architecture not in _ARCHITECTURES:
        raise ConfigError(f"unknown architecture '{architecture}'")
    blocks = _ARCHITECTURES[architecture]
    layers = [LayerDef(f"conv{i}", "conv", out_channels=c, kernel=3, pool=p) for i, (c, p) in enumerate(blocks)]
    layers += [LayerDef(GAP_SITE, "gap"), LayerDef("fc", "dense")]
    if taps is None:
        taps = [l.name for l in layers[:3]]
    return ModelDef(architecture, tuple(input_shape), num_classes, tuple(layers), tuple(taps))


# ── Forward ─────────────────────────────────────────────────────────────

Observer = Callable[[str, Node], None]


def _quantized_weight(params: Mapping[str, Node], specs: Mapping[str, QuantSpec], name: str) -> Node:
    spec = specs.get(weight_key(name))
    return params[name] if spec is None else fake_quantize(params[name], spec)


def _activation(h: Node, specs: Mapping[str, QuantSpec], site: str, observer: Optional[Observer]) -> Node:
    if observer is not None:
        observer(site, h)
    spec = specs.get(activation_key(site))
    return h if spec is None else fake_quantize(h, spec)


def forward(
    model: ModelDef,
    params: Mapping[str, Node],
    x: Node,
    specs: Mapping[str, QuantSpec],
    observer: Optional[Observer] = None,
) -> Tuple[Node, Dict[str, Node]]:
    """Logits and tap activations; missing specs mean full precision."""
    expected = tuple(model.input_shape)
    if x.ndim != 4 or tuple(x.shape[1:]) != expected:
        raise ShapeError("forward", x.shape, (x.shape[0] if x.ndim else 0,) + expected)
    taps: Dict[str, Node] = {}
    h = x
    for layer in model.layers:
        if layer.kind == "conv":
            w = _quantized_weight(params, specs, f"{layer.name}.weight")
            b = ops.reshape(params[f"{layer.name}.bias"], (1, layer.out_channels, 1, 1))
            h = ops.relu(ops.conv2d(h, w, padding=layer.kernel // 2) + b)
            h = _activation(h, specs, layer.name, observer)
            if layer.pool:
                h = ops.max_pool2d(h)
            if layer.name in model.taps:
                taps[layer.name] = h
        elif layer.kind == "gap":
            h = _activation(ops.reduce_mean(h, axis=(2, 3)), specs, GAP_SITE, observer)
        elif layer.kind == "dense":
            w = _quantized_weight(params, specs, f"{layer.name}.weight")
            h = ops.matmul(h, w) + params[f"{layer.name}.bias"]
    return h, taps


@dataclass(frozen=True)
class VariantHandle:
    state: "EnsembleState"
    bits: int

    @property
    def model(self) -> ModelDef:
        return self.state.model

    @property
    def specs(self) -> Dict[str, QuantSpec]:
        try:
            return self.state.specs[self.bits]
        except KeyError:
            raise QuantizationError(f"no quantization specs for {self.bits}-bit") from None

    def weights(self) -> Dict[str, np.ndarray]:
        return self.state.weights_for(self.bits)


def _as_node(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def forward_with_taps(h: VariantHandle, x, params: Optional[Mapping[str, Node]] = None) -> Tuple[Node, Dict[str, Node]]:
    """Forward of one variant; ``params`` defaults to constants of the handle's weights."""
    specs = h.specs
    if params is None:
        params = {n: const(a) for n, a in h.weights().items()}
    return forward(h.model, params, _as_node(x), specs)


def check_labels(y: np.ndarray, num_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise DataError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def cross_entropy(logits: Node, y: np.ndarray) -> Node:
    """Mean softmax cross-entropy against integer labels."""
    y = check_labels(y, logits.shape[1])
    return ops.reduce_mean(ops.softmax_cross_entropy(logits, ops.one_hot(y, logits.shape[1])))


def clean_ce(h: VariantHandle, x, y: np.ndarray, params: Optional[Mapping[str, Node]] = None) -> Node:
    check_labels(y, h.model.num_classes)
    logits, _ = forward_with_taps(h, x, params)
    return cross_entropy(logits, y)


def predict(h: VariantHandle, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    with no_grad():
        for start in range(0, len(images), batch_size):
            logits, _ = forward_with_taps(h, images[start:start + batch_size])
            out.append(np.argmax(logits.value, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


# ── Calibration ─────────────────────────────────────────────────────────

def activation_maxima(
    model: ModelDef,
    weights: Mapping[str, np.ndarray],
    weight_specs: Mapping[str, QuantSpec],
    batch: np.ndarray,
    chunk: int = 64,
    bits: Optional[int] = None,
) -> Dict[str, float]:
    """Running max|a| per activation site, with weights already quantized.

    With ``bits`` set, sites are calibrated in forward order: each site is
    observed through the freshly quantized activations upstream of it, one
    pass over ``batch`` per site. Without it, one pass sees every site with
    whatever activation specs ``weight_specs`` carries.
    """
    maxima = {site: 0.0 for site in model.activation_sites}
    specs = dict(weight_specs)
    targets = model.activation_sites if bits is not None else (None,)

    with no_grad():
        params = {n: const(a) for n, a in weights.items()}
        for target in targets:
            def observe(site: str, h: Node) -> None:
                if target is None or site == target:
                    maxima[site] = max(maxima[site], float(np.max(np.abs(h.value))))

            for start in range(0, len(batch), chunk):
                forward(model, params, const(batch[start:start + chunk]), specs, observe)
            if target is not None:
                specs[activation_key(target)] = QuantSpec.from_max(maxima[target], bits)
    return maxima


def calibrate_variant(
    model: ModelDef,
    weights: Mapping[str, np.ndarray],
    bits: int,
    calibration_batch: Optional[np.ndarray],
    previous: Optional[Mapping[str, QuantSpec]] = None,
    recalibrate_activations: bool = True,
) -> Dict[str, QuantSpec]:
    """Weight and activation specs of one variant from the current weights."""
    weight_tensors = {n: weights[n] for n in model.weight_names}
    specs = quantize_model(weight_tensors, bits, recalibrate=True)
    if previous is not None and not recalibrate_activations:
        acts = {k: v for k, v in previous.items() if k.startswith("a:")}
        if len(acts) == len(model.activation_sites):
            specs.update(acts)
            return specs
    return quantize_model(
        weight_tensors,
        bits,
        recalibrate=True,
        activation_sites=model.activation_sites,
        activation_ranges=lambda batch, wspecs: activation_maxima(model, weights, wspecs, batch, bits=bits),
        calibration_batch=calibration_batch,
    )
