"""Declarative small CNNs with a GAP -> FC classifier tail."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .rng import derive_rng
from .tensor import ShapeError, Tensor


class SpecError(ValueError):
    """Raised for malformed or shape-inconsistent network specs."""


@dataclass(frozen=True)
class Conv:
    cout: int
    kh: int = 3
    kw: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AvgPool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class GAP:
    pass


@dataclass(frozen=True)
class FC:
    cout: int


Layer = Union[Conv, ReLU, AvgPool, GAP, FC]

_LAYER_TYPES = {"conv": Conv, "relu": ReLU, "avgpool": AvgPool, "gap": GAP, "fc": FC}
_TYPE_NAMES = {v: k for k, v in _LAYER_TYPES.items()}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple  # (H, W, C)
    num_classes: int
    feature_tap: str = "post"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        validate_spec(self)

    def to_json(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"type": _TYPE_NAMES[type(layer)]}
            d.update(layer.__dict__)
            layers.append(d)
        return {"layers": layers, "input_shape": list(self.input_shape),
                "num_classes": self.num_classes, "feature_tap": self.feature_tap}

    @classmethod
    def from_json(cls, obj: dict) -> "NetworkSpec":
        allowed = {"layers", "input_shape", "num_classes", "feature_tap"}
        extra = set(obj) - allowed
        if extra:
            raise SpecError(f"unknown network spec keys: {sorted(extra)}")
        missing = {"layers", "input_shape", "num_classes"} - set(obj)
        if missing:
            raise SpecError(f"network spec missing keys: {sorted(missing)}")
        layers = []
        for i, d in enumerate(obj["layers"]):
            d = dict(d)
            kind = d.pop("type", None)
            if kind not in _LAYER_TYPES:
                raise SpecError(f"layer {i}: unknown type {kind!r}")
            try:
                layers.append(_LAYER_TYPES[kind](**d))
            except TypeError as exc:
                raise SpecError(f"layer {i} ({kind}): {exc}") from None
        return cls(layers=tuple(layers), input_shape=tuple(obj["input_shape"]),
                   num_classes=int(obj["num_classes"]),
                   feature_tap=obj.get("feature_tap", "post"))


def validate_spec(spec: NetworkSpec) -> None:
    """Check the tail structure and run the shape propagator."""
    layers = spec.layers
    if spec.feature_tap not in ("pre", "post"):
        raise SpecError(f"feature_tap must be 'pre' or 'post', got {spec.feature_tap!r}")
    if len(spec.input_shape) != 3 or min(spec.input_shape) < 1:
        raise SpecError(f"input_shape must be three positive ints (H, W, C), got {spec.input_shape}")
    if spec.num_classes < 1:
        raise SpecError("num_classes must be positive")
    n_gap = sum(isinstance(l, GAP) for l in layers)
    n_fc = sum(isinstance(l, FC) for l in layers)
    if n_gap != 1 or n_fc != 1 or len(layers) < 2 or not isinstance(layers[-2], GAP) or not isinstance(layers[-1], FC):
        raise SpecError("network must end with exactly one GAP followed by exactly one FC")
    if layers[-1].cout != spec.num_classes:
        raise SpecError(f"FC cout {layers[-1].cout} != num_classes {spec.num_classes}")
    if not any(isinstance(l, Conv) for l in layers):
        raise SpecError("network needs at least one conv layer")
    propagate_shapes(spec)


def propagate_shapes(spec: NetworkSpec) -> list[tuple]:
    """Return the per-sample output shape after every layer."""
    h, w, c = spec.input_shape
    shapes = []
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            if min(layer.kh, layer.kw, layer.stride, layer.cout) < 1 or layer.padding < 0:
                raise SpecError(f"layer {i}: invalid conv parameters {layer}")
            if layer.kh > h + 2 * layer.padding or layer.kw > w + 2 * layer.padding:
                raise SpecError(f"layer {i}: kernel {layer.kh}x{layer.kw} larger than padded input {h}x{w}")
            h = (h + 2 * layer.padding - layer.kh) // layer.stride + 1
            w = (w + 2 * layer.padding - layer.kw) // layer.stride + 1
            c = layer.cout
            shapes.append((h, w, c))
        elif isinstance(layer, AvgPool):
            if layer.window > h or layer.window > w or layer.window < 1 or layer.stride < 1:
                raise SpecError(f"layer {i}: pooling window {layer.window} invalid for {h}x{w}")
            h = (h - layer.window) // layer.stride + 1
            w = (w - layer.window) // layer.stride + 1
            shapes.append((h, w, c))
        elif isinstance(layer, ReLU):
            shapes.append((h, w, c))
        elif isinstance(layer, GAP):
            shapes.append((c,))
        elif isinstance(layer, FC):
            shapes.append((layer.cout,))
        else:
            raise SpecError(f"layer {i}: unsupported layer {layer!r}")
    return shapes


def tap_index(spec: NetworkSpec) -> int:
    """Index of the layer whose output is the distillation feature map."""
    last_conv = max(i for i, l in enumerate(spec.layers) if isinstance(l, Conv))
    if spec.feature_tap == "post" and isinstance(spec.layers[last_conv + 1], ReLU):
        return last_conv + 1
    return last_conv


def tap_shape(spec: NetworkSpec) -> tuple:
    """``(H, W, C)`` of the distillation feature map."""
    return propagate_shapes(spec)[tap_index(spec)]


def reference_teacher(num_classes: int = 10, input_shape=(16, 16, 3)) -> NetworkSpec:
    return _three_block(num_classes, input_shape, (32, 64, 128))


def reference_student(num_classes: int = 10, input_shape=(16, 16, 3)) -> NetworkSpec:
    return _three_block(num_classes, input_shape, (8, 16, 32))


def _three_block(num_classes, input_shape, widths) -> NetworkSpec:
    layers = []
    for i, width in enumerate(widths):
        layers += [Conv(width), ReLU()]
        if i < len(widths) - 1:
            layers.append(AvgPool(2, 2))
    layers += [GAP(), FC(num_classes)]
    return NetworkSpec(tuple(layers), input_shape, num_classes)


REFERENCE_SPECS = {"reference-teacher": reference_teacher, "reference-student": reference_student}


def uniform_fan_in(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform(-b, b) with ``b = sqrt(6 / fan_in)``, i.e. std ``sqrt(2 / fan_in)``."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Network:
    spec: NetworkSpec
    params: dict = field(default_factory=dict)
    ft: Optional["FTModule"] = None  # noqa: F821

    def parameters(self) -> list[Tensor]:
        """Trainable tensors in a fixed order (backbone, then FT)."""
        out = [self.params[k] for k in self.params]
        if self.ft is not None:
            out += [self.ft.w_se, self.ft.w_sc]
        return out

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        items = list(self.params.items())
        if self.ft is not None:
            items += [("ft.w_se", self.ft.w_se), ("ft.w_sc", self.ft.w_sc)]
        return items

    def num_parameters(self) -> int:
        return int(sum(t.size for t in self.parameters()))

    def set_requires_grad(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def fc_weight(self) -> Tensor:
        return self.params[f"layer{len(self.spec.layers) - 1}.weight"]


def build_network(spec: NetworkSpec, seed: int) -> Network:
    """Instantiate parameters deterministically from ``seed``.

    Conv kernels and the FC weight are fan-in uniform; biases start at zero.
    """
    rng = derive_rng(seed, "init")
    params: dict[str, Tensor] = {}
    c = spec.input_shape[2]
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            shape = (layer.kh, layer.kw, c, layer.cout)
            params[f"layer{i}.weight"] = Tensor(uniform_fan_in(rng, shape, layer.kh * layer.kw * c),
                                                requires_grad=True, name=f"layer{i}.weight")
            params[f"layer{i}.bias"] = Tensor(np.zeros(layer.cout), requires_grad=True, name=f"layer{i}.bias")
            c = layer.cout
        elif isinstance(layer, FC):
            params[f"layer{i}.weight"] = Tensor(uniform_fan_in(rng, (layer.cout, c), c),
                                                requires_grad=True, name=f"layer{i}.weight")
            params[f"layer{i}.bias"] = Tensor(np.zeros(layer.cout), requires_grad=True, name=f"layer{i}.bias")
    return Network(spec=spec, params=params)


def forward(net: Network, batch) -> tuple[Tensor, Tensor]:
    """Run the network, returning ``(tap_features, logits)``.

    ``tap_features`` is the map entering the FT module (or GAP when no FT
    is attached); with an FT module the logits are computed through it.
    """
    features, _, logits = forward_full(net, batch)
    return features, logits


def forward_full(net: Network, batch) -> tuple[Tensor, Optional[Tensor], Tensor]:
    """Like :func:`forward` but also returns the FT expanded map (or None)."""
    from .norm import ft_forward

    x = T.as_tensor(batch)
    spec = net.spec
    if x.ndim != 4 or x.shape[1:] != spec.input_shape:
        raise ShapeError(f"batch shape {x.shape} does not match input shape [B, {spec.input_shape}]")
    tap = tap_index(spec)
    features = expanded = None
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Conv):
            x = T.conv2d(x, net.params[f"layer{i}.weight"], layer.stride, layer.padding)
            x = T.add_channel_bias(x, net.params[f"layer{i}.bias"])
        elif isinstance(layer, ReLU):
            x = T.relu(x)
        elif isinstance(layer, AvgPool):
            x = T.avg_pool2d(x, layer.window, layer.stride)
        elif isinstance(layer, GAP):
            x = T.global_avg_pool(x)
        elif isinstance(layer, FC):
            x = T.fully_connected(x, net.params[f"layer{i}.weight"], net.params[f"layer{i}.bias"])
        if i == tap:
            features = x
            if net.ft is not None:
                expanded, x = ft_forward(net.ft, x)
    return features, expanded, x


def predict_logits(net: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Graph-free logits over a whole array, evaluated in fixed-size chunks."""
    outs = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            outs.append(forward(net, Tensor(images[start:start + batch_size]))[1].data)
    if not outs:
        return np.zeros((0, net.spec.num_classes))
    return np.concatenate(outs, axis=0)
