"""Architecture specifications and instantiation for the five classifiers.

Specs are declarative layer lists; shape inference adapts one spec to all
six feature-map geometries, with an adaptive average pool giving every
network a fixed-size classifier input.  Feature maps narrower than 64 rows
are zero-padded symmetrically so the stride-4 stems never collapse.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import FeatureMap

NUM_CLASSES = 5
MIN_INPUT_ROWS = 64

ARCHITECTURE_NAMES = ("ymcm", "cnn", "alexnet", "vgg16_mini", "mobilenet_mini")


class GeometryError(ValueError):
    """An input geometry that collapses inside the network."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    padding: str | None = None
    window: int | None = None
    units: int | None = None
    rate: float | None = None
    out_h: int | None = None
    out_w: int | None = None

    def describe(self) -> str:
        parts = [self.kind]
        for name in ("filters", "kernel", "stride", "padding", "window", "units", "rate", "out_h", "out_w"):
            value = getattr(self, name)
            if value is not None:
                parts.append(f"{name}={value}")
        return " ".join(parts)


@dataclass(frozen=True)
class ArchitectureSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    num_classes: int = NUM_CLASSES

    def __post_init__(self):
        softmax_count = sum(1 for l in self.layers if l.kind == "softmax")
        if softmax_count != 1 or self.layers[-1].kind != "softmax":
            raise ValueError(f"{self.name}: specs must end in exactly one softmax")


def serialize_spec(spec: ArchitectureSpec) -> str:
    lines = [f"architecture {spec.name}", f"classes {spec.num_classes}"]
    lines += [layer.describe() for layer in spec.layers]
    return "\n".join(lines) + "\n"


def deserialize_spec(text: str) -> ArchitectureSpec:
    lines = [l.strip() for l in text.strip().splitlines() if l.strip()]
    if len(lines) < 3 or not lines[0].startswith("architecture ") or not lines[1].startswith("classes "):
        raise ValueError("malformed architecture document")
    name = lines[0].split(None, 1)[1]
    num_classes = int(lines[1].split()[1])
    layers = []
    casts = {"padding": str, "rate": float}
    for line in lines[2:]:
        tokens = line.split()
        params = {}
        for token in tokens[1:]:
            key, value = token.split("=")
            params[key] = casts.get(key, int)(value)
        layers.append(LayerSpec(kind=tokens[0], **params))
    return ArchitectureSpec(name=name, layers=tuple(layers), num_classes=num_classes)


# --------------------------------------------------------------------------
# Builders
# --------------------------------------------------------------------------

def _conv_block(filters: int, kernel: int, stride: int = 1) -> list[LayerSpec]:
    return [
        LayerSpec("conv", filters=filters, kernel=kernel, stride=stride, padding="same"),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
    ]


def build_ymcm() -> ArchitectureSpec:
    """Five-conv-layer genre classifier: filters 64/192/384/256/256, dense 1024/512."""
    layers = []
    layers += _conv_block(64, 11, stride=4)
    layers.append(LayerSpec("maxpool", window=3, stride=2))
    layers += _conv_block(192, 5)
    layers.append(LayerSpec("maxpool", window=3, stride=2))
    layers += _conv_block(384, 3)
    layers += _conv_block(256, 3)
    layers += _conv_block(256, 3)
    layers.append(LayerSpec("maxpool", window=3, stride=2))
    layers.append(LayerSpec("adaptive_avg_pool", out_h=4, out_w=4))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("dense", units=1024))
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("dense", units=512))
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("dense", units=NUM_CLASSES))
    layers.append(LayerSpec("softmax"))
    return ArchitectureSpec(name="ymcm", layers=tuple(layers))


def build_baseline_cnn() -> ArchitectureSpec:
    """Two interleaved conv/pool stages and a small dense head."""
    layers = [
        LayerSpec("conv", filters=32, kernel=5, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=2, stride=2),
        LayerSpec("conv", filters=64, kernel=5, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=2, stride=2),
        LayerSpec("flatten"),
        LayerSpec("dense", units=128),
        LayerSpec("relu"),
        LayerSpec("dense", units=NUM_CLASSES),
        LayerSpec("softmax"),
    ]
    return ArchitectureSpec(name="cnn", layers=tuple(layers))


def build_alexnet() -> ArchitectureSpec:
    """Standard 5-conv / 3-dense layout with the dense head at desk scale."""
    layers = [
        LayerSpec("conv", filters=96, kernel=11, stride=4, padding="same"),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=3, stride=2),
        LayerSpec("conv", filters=256, kernel=5, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=3, stride=2),
        LayerSpec("conv", filters=384, kernel=3, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("conv", filters=384, kernel=3, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("conv", filters=256, kernel=3, stride=1, padding="same"),
        LayerSpec("relu"),
        LayerSpec("maxpool", window=3, stride=2),
        LayerSpec("adaptive_avg_pool", out_h=4, out_w=4),
        LayerSpec("flatten"),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("dense", units=1024),
        LayerSpec("relu"),
        LayerSpec("dropout", rate=0.5),
        LayerSpec("dense", units=512),
        LayerSpec("relu"),
        LayerSpec("dense", units=NUM_CLASSES),
        LayerSpec("softmax"),
    ]
    return ArchitectureSpec(name="alexnet", layers=tuple(layers))


def build_vgg16_mini() -> ArchitectureSpec:
    """The 13-conv 3x3 stack at quarter width (16/32/64/128/128 per block)."""
    layers = []
    for width, depth in ((16, 2), (32, 2), (64, 3), (128, 3), (128, 3)):
        for _ in range(depth):
            layers.append(LayerSpec("conv", filters=width, kernel=3, stride=1, padding="same"))
            layers.append(LayerSpec("relu"))
        layers.append(LayerSpec("maxpool", window=2, stride=2))
    layers.append(LayerSpec("adaptive_avg_pool", out_h=4, out_w=4))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("dense", units=512))
    layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("dense", units=NUM_CLASSES))
    layers.append(LayerSpec("softmax"))
    return ArchitectureSpec(name="vgg16_mini", layers=tuple(layers))


def build_mobilenet_mini() -> ArchitectureSpec:
    """3x3 stem conv then 8 depthwise-separable blocks at quarter width."""
    layers = [
        LayerSpec("conv", filters=8, kernel=3, stride=2, padding="same"),
        LayerSpec("batchnorm"),
        LayerSpec("relu"),
    ]
    widths = (16, 32, 32, 64, 64, 128, 128, 128)
    strides = (1, 2, 1, 2, 1, 2, 1, 1)
    for width, stride in zip(widths, strides):
        layers.append(LayerSpec("depthwise_sep_conv", filters=width, kernel=3, stride=stride, padding="same"))
        layers.append(LayerSpec("batchnorm"))
        layers.append(LayerSpec("relu"))
    layers.append(LayerSpec("adaptive_avg_pool", out_h=1, out_w=1))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("dense", units=NUM_CLASSES))
    layers.append(LayerSpec("softmax"))
    return ArchitectureSpec(name="mobilenet_mini", layers=tuple(layers))


_BUILDERS = {
    "ymcm": build_ymcm,
    "cnn": build_baseline_cnn,
    "alexnet": build_alexnet,
    "vgg16_mini": build_vgg16_mini,
    "mobilenet_mini": build_mobilenet_mini,
}


def build_architecture(name: str) -> ArchitectureSpec:
    try:
        return _BUILDERS[name]()
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; expected one of {ARCHITECTURE_NAMES}") from None


# --------------------------------------------------------------------------
# Shape inference and parameter accounting
# --------------------------------------------------------------------------

def _conv_out(dim: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-dim // stride)
    return (dim - kernel) // stride + 1


def infer_shapes(spec: ArchitectureSpec, geometry: tuple[int, int, int]) -> list[tuple]:
    """Per-layer output shapes for a C x H x W input; fails loudly on collapse."""
    shape = tuple(geometry)
    chain = []
    for idx, layer in enumerate(spec.layers):
        where = f"layer {idx} ({layer.kind})"
        if layer.kind in ("conv", "depthwise_sep_conv"):
            c, h, w = shape
            oh = _conv_out(h, layer.kernel, layer.stride, layer.padding)
            ow = _conv_out(w, layer.kernel, layer.stride, layer.padding)
            if oh < 1 or ow < 1:
                raise GeometryError(f"{spec.name}: spatial collapse at {where}: {h}x{w} -> {oh}x{ow}")
            shape = (layer.filters, oh, ow)
        elif layer.kind == "maxpool":
            c, h, w = shape
            oh = (h - layer.window) // layer.stride + 1
            ow = (w - layer.window) // layer.stride + 1
            if oh < 1 or ow < 1:
                raise GeometryError(f"{spec.name}: spatial collapse at {where}: {h}x{w} -> {oh}x{ow}")
            shape = (c, oh, ow)
        elif layer.kind == "adaptive_avg_pool":
            c, h, w = shape
            if h < 1 or w < 1:
                raise GeometryError(f"{spec.name}: empty input at {where}")
            shape = (c, layer.out_h, layer.out_w)
        elif layer.kind in ("batchnorm", "relu", "dropout", "softmax"):
            pass
        elif layer.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif layer.kind == "dense":
            shape = (layer.units,)
        else:
            raise ValueError(f"unknown layer kind {layer.kind!r}")
        chain.append(shape)
    return chain


def count_parameters(spec: ArchitectureSpec, geometry: tuple[int, int, int]) -> int:
    """Trainable parameter total derived by walking the spec."""
    total = 0
    shape = tuple(geometry)
    for layer, out_shape in zip(spec.layers, infer_shapes(spec, geometry)):
        if layer.kind == "conv":
            c = shape[0]
            total += layer.filters * c * layer.kernel * layer.kernel + layer.filters
        elif layer.kind == "depthwise_sep_conv":
            c = shape[0]
            total += c * layer.kernel * layer.kernel + layer.filters * c
        elif layer.kind == "batchnorm":
            total += 2 * shape[0]
        elif layer.kind == "dense":
            total += shape[0] * layer.units + layer.units
        shape = out_shape
    return total


# --------------------------------------------------------------------------
# Input adaptation
# --------------------------------------------------------------------------

def adapt_input(feature_map: FeatureMap) -> np.ndarray:
    """Normalized F x T map -> 1 x 1 x H x W tensor, zero-padded to >= 64 rows.

    Padding preserves the original values exactly in the central band;
    interpolation would invent data.
    """
    values = feature_map.values.astype(np.float32)
    f = values.shape[0]
    if f < MIN_INPUT_ROWS:
        top = (MIN_INPUT_ROWS - f) // 2
        bottom = MIN_INPUT_ROWS - f - top
        values = np.pad(values, ((top, bottom), (0, 0)))
    return values[None, None, :, :]


# --------------------------------------------------------------------------
# Model instances
# --------------------------------------------------------------------------

def _kaiming_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ModelInstance:
    """An ArchitectureSpec instantiated for one input geometry."""

    def __init__(self, spec: ArchitectureSpec, geometry: tuple[int, int, int], seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.geometry = tuple(geometry)
        self.dtype = dtype
        self.shapes = infer_shapes(spec, geometry)
        self.parameters: list[ad.Parameter] = []
        self.bn_states: dict[int, ad.BatchNormState] = {}
        self._layer_params: dict[int, dict[str, ad.Parameter]] = {}
        self.rng = np.random.default_rng(seed)
        self._build()

    def _add_param(self, layer_idx: int, role: str, data: np.ndarray) -> None:
        param = ad.Parameter(data, name=f"layer{layer_idx}.{role}")
        self.parameters.append(param)
        self._layer_params.setdefault(layer_idx, {})[role] = param

    def _build(self) -> None:
        shape = self.geometry
        for idx, layer in enumerate(self.spec.layers):
            if layer.kind == "conv":
                c = shape[0]
                fan_in = c * layer.kernel * layer.kernel
                self._add_param(
                    idx, "kernels",
                    _kaiming_uniform(self.rng, (layer.filters, c, layer.kernel, layer.kernel), fan_in, self.dtype),
                )
                self._add_param(idx, "bias", np.zeros(layer.filters, dtype=self.dtype))
            elif layer.kind == "depthwise_sep_conv":
                c = shape[0]
                self._add_param(
                    idx, "depth",
                    _kaiming_uniform(self.rng, (c, layer.kernel, layer.kernel), layer.kernel**2, self.dtype),
                )
                self._add_param(idx, "point", _kaiming_uniform(self.rng, (layer.filters, c), c, self.dtype))
            elif layer.kind == "batchnorm":
                c = shape[0]
                self._add_param(idx, "gamma", np.ones(c, dtype=self.dtype))
                self._add_param(idx, "beta", np.zeros(c, dtype=self.dtype))
                self.bn_states[idx] = ad.BatchNormState(c, dtype=self.dtype)
            elif layer.kind == "dense":
                d = shape[0]
                weights = _kaiming_uniform(self.rng, (d, layer.units), d, self.dtype)
                if layer.units == self.spec.num_classes:
                    # damp the classifier head so fresh models emit
                    # near-uniform probabilities regardless of depth; Adam's
                    # per-coordinate scaling makes the small start harmless
                    weights *= 0.01
                self._add_param(idx, "weights", weights)
                self._add_param(idx, "bias", np.zeros(layer.units, dtype=self.dtype))
            shape = self.shapes[idx]

    def parameter_count(self) -> int:
        return sum(int(np.prod(p.tensor.shape)) for p in self.parameters)

    def forward_logits(self, batch: np.ndarray, tape: ad.Tape | None = None, training: bool = False) -> ad.Tensor:
        """Run all layers up to (excluding) the terminal softmax.

        Spatial layers run channels-last internally; the batch is permuted
        once on entry so the per-layer transposes of the public NCHW ops
        never happen on the training path.
        """
        if batch.shape[1:] != self.geometry:
            raise GeometryError(f"batch geometry {batch.shape[1:]} != model geometry {self.geometry}")
        if not training and any(s.batches_seen == 0 for s in self.bn_states.values()):
            warnings.warn(
                f"{self.spec.name}: eval before any training batch; batchnorm uses identity statistics",
                stacklevel=2,
            )
        x = ad.Tensor(np.ascontiguousarray(np.asarray(batch, dtype=self.dtype).transpose(0, 2, 3, 1)))
        for idx, layer in enumerate(self.spec.layers):
            params = self._layer_params.get(idx, {})
            if layer.kind == "conv":
                x = ad.conv2d_nhwc(
                    tape, x, params["kernels"].tensor, params["bias"].tensor, layer.stride, layer.padding
                )
            elif layer.kind == "depthwise_sep_conv":
                x = ad.depthwise_separable_conv2d_nhwc(
                    tape, x, params["depth"].tensor, params["point"].tensor, layer.stride, layer.padding
                )
            elif layer.kind == "batchnorm":
                # in-place is safe here: layers form a chain and no producer
                # reads its own output during backward
                x = ad.batchnorm2d_nhwc(
                    tape, x, params["gamma"].tensor, params["beta"].tensor, self.bn_states[idx], training,
                    inplace=True,
                )
            elif layer.kind == "relu":
                x = ad.relu(tape, x, inplace=True)
            elif layer.kind == "maxpool":
                x = ad.maxpool2d_nhwc(tape, x, layer.window, layer.stride)
            elif layer.kind == "adaptive_avg_pool":
                x = ad.adaptive_avg_pool2d_nhwc(tape, x, layer.out_h, layer.out_w)
            elif layer.kind == "flatten":
                x = ad.flatten(tape, x)
            elif layer.kind == "dense":
                x = ad.dense(tape, x, params["weights"].tensor, params["bias"].tensor)
            elif layer.kind == "dropout":
                x = ad.dropout(tape, x, layer.rate, self.rng, training)
            elif layer.kind == "softmax":
                break
        return x

    def forward(self, batch: np.ndarray, tape: ad.Tape | None = None, training: bool = False) -> np.ndarray:
        """Class probabilities, rows summing to 1."""
        logits = self.forward_logits(batch, tape, training)
        return ad.softmax(logits.data)

    # -- state management ---------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {p.name: p.tensor.data for p in self.parameters}
        for idx, state in self.bn_states.items():
            arrays[f"layer{idx}.running_mean"] = state.running_mean
            arrays[f"layer{idx}.running_var"] = state.running_var
        return arrays

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: arr.copy() for name, arr in self.state_arrays().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters:
            if p.name not in arrays:
                raise KeyError(f"checkpoint missing {p.name}")
            if arrays[p.name].shape != p.tensor.shape:
                raise GeometryError(f"{p.name}: checkpoint shape {arrays[p.name].shape} != {p.tensor.shape}")
            p.tensor.data = arrays[p.name].astype(self.dtype).copy()
        for idx, state in self.bn_states.items():
            state.running_mean = arrays[f"layer{idx}.running_mean"].astype(self.dtype).copy()
            state.running_var = arrays[f"layer{idx}.running_var"].astype(self.dtype).copy()
            state.batches_seen = max(state.batches_seen, 1)

    def save_checkpoint(self, path) -> None:
        ad.save_checkpoint(path, self.state_arrays())

    def load_checkpoint(self, path) -> None:
        self.load_state(ad.load_checkpoint(path))

    def zero_grad(self) -> None:
        for p in self.parameters:
            p.tensor.zero_grad()
