"""The nine reference CNN architectures and their weight layout.

Each architecture is a row of a presence matrix over a fixed layer menu:
three 5x5 convolutions (6/16/32 filters), each followed by 2x2
max-pooling with relu, and up to three fully-connected layers
(120/84/1 neurons). Every architecture keeps Conv1+pool and the final
1-neuron output layer, which maps to a probability through a sigmoid.

The flattened-weight contract (v1, frozen): parameters concatenate in
layer order, kernel before bias within a layer, row-major within each
tensor. Subset modes select conv or fully-connected layers only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import engine
from .errors import ConfigurationError

CONV_FILTERS = (6, 16, 32)
CONV_KERNEL = 5
FC_HIDDEN = (120, 84)
SUBSET_MODES = ("full", "conv_only", "fcn_only")

# id -> (number of conv blocks, hidden fc widths). All end in the
# 1-neuron output layer.
ARCH_TABLE: dict[str, tuple[int, tuple[int, ...]]] = {
    "A1": (3, (120, 84)),
    "A2": (3, (120,)),
    "A3": (3, ()),
    "A4": (2, (120, 84)),
    "A5": (2, (120,)),
    "A6": (2, ()),
    "A7": (1, (120, 84)),
    "A8": (1, (120,)),
    "A9": (1, ()),
}
ARCH_IDS = tuple(ARCH_TABLE)


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "maxpool" | "fc" | "activation"
    filters: int | None = None
    kernel_size: int | None = None
    neurons: int | None = None
    activation: str | None = None
    source_row: str = ""


@dataclass(frozen=True)
class ArchitectureSpec:
    id: str
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]  # (channels, height, width)


def make_spec(arch_id: str, input_shape=(3, 64, 64)) -> ArchitectureSpec:
    if arch_id not in ARCH_TABLE:
        raise ConfigurationError(f"unknown architecture id {arch_id!r}")
    n_conv, fc_widths = ARCH_TABLE[arch_id]
    layers: list[LayerSpec] = []
    for i in range(n_conv):
        layers.append(LayerSpec("conv", filters=CONV_FILTERS[i],
                                kernel_size=CONV_KERNEL,
                                source_row=f"Convolution {i + 1}"))
        layers.append(LayerSpec("maxpool", source_row="Max-pool"))
        layers.append(LayerSpec("activation", activation="relu",
                                source_row="Max-pool"))
    for j, width in enumerate(fc_widths):
        layers.append(LayerSpec("fc", neurons=width,
                                source_row=f"Fully-Connected {j + 1}"))
        layers.append(LayerSpec("activation", activation="relu",
                                source_row=f"Fully-Connected {j + 1}"))
    layers.append(LayerSpec("fc", neurons=1, source_row="Fully-Connected 3"))
    layers.append(LayerSpec("activation", activation="sigmoid",
                            source_row="Fully-Connected 3"))
    spec = ArchitectureSpec(arch_id, tuple(layers), tuple(input_shape))
    propagate_shapes(spec)  # validate now so bad input sizes fail early
    return spec


def propagate_shapes(spec: ArchitectureSpec) -> list[tuple[int, ...]]:
    """Shape after each layer; raises naming the first failing layer."""
    shape: tuple[int, ...] = spec.input_shape
    shapes = []
    for idx, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            c, h, w = shape
            oh, ow = h - layer.kernel_size + 1, w - layer.kernel_size + 1
            if oh < 1 or ow < 1:
                raise ConfigurationError(
                    f"{spec.id} layer {idx} ({layer.source_row}): input {h}x{w} "
                    f"too small for {layer.kernel_size}x{layer.kernel_size} kernel")
            shape = (layer.filters, oh, ow)
        elif layer.kind == "maxpool":
            c, h, w = shape
            if h // 2 < 1 or w // 2 < 1:
                raise ConfigurationError(
                    f"{spec.id} layer {idx} (Max-pool): input {h}x{w} too small")
            shape = (c, h // 2, w // 2)
        elif layer.kind == "fc":
            n_in = int(np.prod(shape))
            shape = (layer.neurons,)
        # activations keep shape
        shapes.append(shape)
    return shapes


def _param_shapes(spec: ArchitectureSpec):
    """Yield (layer_index, layer_kind, param_kind, tensor_shape) in the
    frozen flattening order."""
    shape: tuple[int, ...] = spec.input_shape
    for idx, layer in enumerate(spec.layers):
        if layer.kind == "conv":
            c, h, w = shape
            yield idx, "conv", "kernel", (layer.filters, c, layer.kernel_size,
                                          layer.kernel_size)
            yield idx, "conv", "bias", (layer.filters,)
            shape = (layer.filters, h - layer.kernel_size + 1,
                     w - layer.kernel_size + 1)
        elif layer.kind == "maxpool":
            c, h, w = shape
            shape = (c, h // 2, w // 2)
        elif layer.kind == "fc":
            n_in = int(np.prod(shape))
            yield idx, "fc", "kernel", (layer.neurons, n_in)
            yield idx, "fc", "bias", (layer.neurons,)
            shape = (layer.neurons,)


@dataclass(frozen=True)
class BoundaryEntry:
    """Placement of one parameter tensor inside the full flat vector."""

    layer_index: int
    layer_kind: str  # "conv" | "fc"
    param_kind: str  # "kernel" | "bias"
    offset: int
    length: int


def boundary_table(spec: ArchitectureSpec) -> tuple[BoundaryEntry, ...]:
    entries = []
    offset = 0
    for idx, lkind, pkind, shp in _param_shapes(spec):
        length = int(np.prod(shp))
        entries.append(BoundaryEntry(idx, lkind, pkind, offset, length))
        offset += length
    return tuple(entries)


def parameter_count(spec: ArchitectureSpec) -> int:
    return sum(e.length for e in boundary_table(spec))


def subset_indices(spec: ArchitectureSpec, subset: str) -> np.ndarray:
    """Flat-vector indices selected by a subset mode."""
    if subset not in SUBSET_MODES:
        raise ConfigurationError(f"unknown subset mode {subset!r}")
    want = {"full": ("conv", "fc"), "conv_only": ("conv",),
            "fcn_only": ("fc",)}[subset]
    pieces = [np.arange(e.offset, e.offset + e.length)
              for e in boundary_table(spec) if e.layer_kind in want]
    if not pieces:
        raise ConfigurationError(
            f"subset {subset!r} selects no layers of {spec.id}")
    return np.concatenate(pieces)


class Model:
    """An instantiated architecture: spec plus its engine layers."""

    def __init__(self, spec: ArchitectureSpec, net: engine.Sequential, dtype):
        self.spec = spec
        self.net = net
        self.dtype = dtype

    def parameters(self) -> list[engine.Parameter]:
        return self.net.parameters()

    def forward(self, batch: np.ndarray) -> np.ndarray:
        c, h, w = self.spec.input_shape
        if batch.ndim != 4 or batch.shape[1:] != (c, h, w):
            raise ConfigurationError(
                f"batch shape {batch.shape} does not match input shape "
                f"{self.spec.input_shape}")
        return self.net.forward(batch.astype(self.dtype, copy=False))


def build_architecture(arch_id: str, input_shape=(3, 64, 64), seed=0,
                       dtype=np.float32) -> Model:
    """Fresh seeded model for one architecture row."""
    spec = make_spec(arch_id, input_shape)
    rng = np.random.default_rng(seed)
    shape: tuple[int, ...] = spec.input_shape
    layers: list[engine.Layer] = []
    flattened = False
    for layer in spec.layers:
        if layer.kind == "conv":
            c, h, w = shape
            layers.append(engine.Conv2d(c, layer.filters, layer.kernel_size,
                                        rng, dtype))
            shape = (layer.filters, h - layer.kernel_size + 1,
                     w - layer.kernel_size + 1)
        elif layer.kind == "maxpool":
            c, h, w = shape
            layers.append(engine.MaxPool2x2())
            shape = (c, h // 2, w // 2)
        elif layer.kind == "fc":
            if not flattened:
                layers.append(engine.Flatten())
                flattened = True
            n_in = int(np.prod(shape))
            layers.append(engine.FullyConnected(n_in, layer.neurons, rng, dtype))
            shape = (layer.neurons,)
        else:
            layers.append(engine.Activation(layer.activation))
    return Model(spec, engine.Sequential(layers), dtype)


def flatten_parameters(model: Model, subset: str = "full") -> np.ndarray:
    full = np.concatenate([p.value.ravel() for p in model.parameters()])
    if subset == "full":
        return full
    return full[subset_indices(model.spec, subset)]


def unflatten_parameters(model: Model, vector: np.ndarray) -> None:
    """Restore all parameters from a full flattened vector (in place)."""
    expected = parameter_count(model.spec)
    if vector.shape != (expected,):
        raise ConfigurationError(
            f"vector length {vector.shape} does not match parameter count "
            f"{expected} of {model.spec.id}")
    offset = 0
    for p in model.parameters():
        n = p.value.size
        p.value[...] = vector[offset:offset + n].reshape(p.value.shape)
        offset += n


def forward_model(model: Model, batch: np.ndarray) -> np.ndarray:
    """Probabilities (B, 1) of the positive task class."""
    return model.forward(batch)


def describe(input_shape=(3, 64, 64)) -> str:
    """Human-readable layer table and parameter counts."""
    lines = ["arch  layers                                          params"]
    for arch_id in ARCH_IDS:
        try:
            spec = make_spec(arch_id, input_shape)
        except ConfigurationError:
            lines.append(f"{arch_id:4}  (input {input_shape[1]}x"
                         f"{input_shape[2]} too small for this stack)")
            continue
        parts = []
        for layer in spec.layers:
            if layer.kind == "conv":
                parts.append(f"conv{layer.filters}@{layer.kernel_size}x"
                             f"{layer.kernel_size}")
            elif layer.kind == "maxpool":
                parts.append("pool")
            elif layer.kind == "fc":
                parts.append(f"fc{layer.neurons}")
        lines.append(f"{arch_id:4}  {'-'.join(parts):46}  "
                     f"{parameter_count(spec)}")
    return "\n".join(lines)
