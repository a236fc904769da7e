"""Network architectures, shape inference, parameter storage and checkpoints.

Also runs a network: ``forward_trunk``/``backward_trunk`` walk the shared
trunk through the layer registry, heads are plain fully connected layers on
the trunk features.
"""

from __future__ import annotations

import copy
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np
import pandas as pd

import layers
import tensor_core
from layer_registry import HeadSpec, LabelMode, LayerKind, LayerSpec, Mode, dcn_layers
from layers import FcParams, LayerContext
from tensor_core import Tensor
from utils.constants import (
    ARCHITECTURES,
    CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
    CROP_RESOLUTION,
    DROPOUT_RATE,
    FC1_WIDTH,
    FC2_WIDTH_FLICKR,
    INIT_SCALE,
    POOL_SIZE,
    POOL_STRIDE,
)
from utils.exceptions import (
    ConfigurationError,
    FormatError,
    InfeasibleArchitectureError,
    ParameterError,
)

logger = logging.getLogger(__name__)

Shape = tuple[int, ...]
PathLike = Union[str, Path]


@dataclass(frozen=True)
class NetworkSpec:
    input_resolution: int
    crop_resolution: int
    trunk: tuple[LayerSpec, ...]
    heads: tuple[HeadSpec, ...]
    depth: int = 0          # number of conv layers, 0 for a linear baseline
    channels: int = 3

    def __post_init__(self):
        if self.input_resolution not in CROP_RESOLUTION:
            raise ConfigurationError(f"Input resolution {self.input_resolution} not in {sorted(CROP_RESOLUTION)}")
        if self.crop_resolution != CROP_RESOLUTION[self.input_resolution]:
            raise ConfigurationError(
                f"Resolution {self.input_resolution} crops to {CROP_RESOLUTION[self.input_resolution]}, not {self.crop_resolution}")
        if not self.heads:
            raise ConfigurationError("A network needs at least one output head")
        names = [layer.name for layer in self.trunk] + [head.param_name for head in self.heads]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"Duplicate layer or head names in {names}")

    @property
    def input_shape(self) -> Shape:
        return self.channels, self.crop_resolution, self.crop_resolution

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.trunk if layer.kind is LayerKind.CONV]

    def head(self, name: str) -> HeadSpec:
        for head in self.heads:
            if head.name == name:
                return head
        raise ConfigurationError(f"Unknown head '{name}'. Available heads: {[h.name for h in self.heads]}")

    def with_heads(self, heads: Sequence[HeadSpec]) -> "NetworkSpec":
        return replace(self, heads=tuple(heads))

    def to_dict(self) -> dict[str, Any]:
        return {
            "input_resolution": self.input_resolution,
            "crop_resolution": self.crop_resolution,
            "depth": self.depth,
            "channels": self.channels,
            "trunk": [layer.to_dict() for layer in self.trunk],
            "heads": [head.to_dict() for head in self.heads],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "NetworkSpec":
        return cls(
            input_resolution=int(data["input_resolution"]),
            crop_resolution=int(data["crop_resolution"]),
            trunk=tuple(LayerSpec.from_dict(layer) for layer in data["trunk"]),
            heads=tuple(HeadSpec.from_dict(head) for head in data["heads"]),
            depth=int(data["depth"]),
            channels=int(data.get("channels", 3)),
        )


### Architecture builders ###

def supported_combinations() -> list[tuple[int, int]]:
    return [(depth, res) for depth, table in sorted(ARCHITECTURES.items()) for res in sorted(table)]


def build_architecture(depth: int, resolution: int, heads: Sequence[HeadSpec],
                       fc2_width: int = FC2_WIDTH_FLICKR, fc1_width: int = FC1_WIDTH,
                       width_multiplier: float = 1.0, dropout_rate: float = DROPOUT_RATE) -> NetworkSpec:
    """Build one of the conv architectures (2-5 conv layers) for an input resolution.

    Conv layers with stride > 1 are unpadded, stride-1 layers use
    (N_W - 1) / 2 padding. Every conv layer is followed by ReLU, pooling is
    2x2 non-overlapping where the table says so, and both fully connected
    layers are followed by ReLU and dropout. ``width_multiplier`` scales the
    kernel counts for desk-scale runs; 1.0 is the published architecture.
    """
    table = ARCHITECTURES.get(depth, {})
    if resolution not in table:
        raise ConfigurationError(
            f"No {depth}-conv architecture at {resolution}x{resolution}. Supported (depth, resolution): {supported_combinations()}")
    if width_multiplier <= 0:
        raise ParameterError(f"width_multiplier must be positive, got {width_multiplier}")

    trunk: list[LayerSpec] = []
    for i, (kernels, width, stride, pool_after) in enumerate(table[resolution], start=1):
        padding = 0 if stride > 1 else (width - 1) // 2
        count = max(1, int(round(kernels * width_multiplier)))
        trunk.append(LayerSpec(f"conv{i}", LayerKind.CONV, kernels=count, width=width, stride=stride, padding=padding))
        trunk.append(LayerSpec(f"conv{i}_relu", LayerKind.RELU))
        if pool_after:
            trunk.append(LayerSpec(f"conv{i}_pool", LayerKind.MAXPOOL, pool_size=POOL_SIZE, stride=POOL_STRIDE))

    for j, units in enumerate((fc1_width, fc2_width), start=1):
        trunk.append(LayerSpec(f"fc{j}", LayerKind.FC, units=units))
        trunk.append(LayerSpec(f"fc{j}_relu", LayerKind.RELU))
        trunk.append(LayerSpec(f"fc{j}_dropout", LayerKind.DROPOUT, rate=dropout_rate))

    spec = NetworkSpec(resolution, CROP_RESOLUTION[resolution], tuple(trunk), tuple(heads), depth)
    infer_shapes(spec)
    return spec


def build_linear_baseline(resolution: int, heads: Sequence[HeadSpec]) -> NetworkSpec:
    """Heads read the flattened crop directly: a linear classifier on raw pixels."""
    return NetworkSpec(resolution, CROP_RESOLUTION[resolution], (), tuple(heads), 0)


### Shapes ###

def infer_shapes(spec: NetworkSpec) -> list[tuple[str, Shape]]:
    """Per-sample output shape of the input, every trunk layer and every head, in order."""
    shape = spec.input_shape
    shapes = [("input", shape)]
    for layer in spec.trunk:
        shape = dcn_layers.output_shape(layer, shape)
        if any(d < 1 for d in shape):
            raise InfeasibleArchitectureError(layer.name, shape)
        shapes.append((layer.name, shape))
    for head in spec.heads:
        shapes.append((head.param_name, (head.class_count,)))
    return shapes


def feature_size(spec: NetworkSpec) -> int:
    trunk_shapes = infer_shapes(spec)[: len(spec.trunk) + 1]
    return int(np.prod(trunk_shapes[-1][1]))


def learnable_layout(spec: NetworkSpec) -> list[tuple[str, LayerKind, dict[str, Shape], bool]]:
    """(name, kind, tensor shapes, is_head) for every learnable layer, trunk first."""
    layout = []
    shape = spec.input_shape
    for layer in spec.trunk:
        if layer.learnable:
            layout.append((layer.name, layer.kind, dcn_layers.param_shapes(layer, shape), False))
        shape = dcn_layers.output_shape(layer, shape)
    features = int(np.prod(shape))
    for head in spec.heads:
        layout.append((head.param_name, LayerKind.FC, {"weight": (head.class_count, features), "bias": (head.class_count,)}, True))
    return layout


def parameter_count(spec: NetworkSpec) -> int:
    return sum(int(np.prod(s)) for _, _, shapes, _ in learnable_layout(spec) for s in shapes.values())


def describe_architecture(spec: NetworkSpec) -> pd.DataFrame:
    """One row per layer: kind, description, output shape and parameter count."""
    params = {name: sum(int(np.prod(s)) for s in shapes.values()) for name, _, shapes, _ in learnable_layout(spec)}
    descriptions = {layer.name: (layer.kind.value, layer.describe()) for layer in spec.trunk}
    descriptions.update({h.param_name: ("head", f"{h.label_mode.value}-label, {h.class_count} classes") for h in spec.heads})

    rows = []
    for name, shape in infer_shapes(spec):
        kind, description = descriptions.get(name, ("input", "crop"))
        rows.append({"layer": name, "kind": kind, "description": description,
                     "output_shape": "x".join(str(d) for d in shape), "params": params.get(name, 0)})
    return pd.DataFrame(rows)


### Parameters ###

@dataclass
class LayerParams:
    kind: LayerKind
    tensors: dict[str, Tensor]
    velocity: dict[str, Tensor]
    frozen: bool = False
    is_head: bool = False


class ParamStore:
    """Learnable tensors, momentum buffers and freeze flags per learnable layer."""

    def __init__(self, layers_: Optional[dict[str, LayerParams]] = None):
        self.layers: dict[str, LayerParams] = dict(layers_ or {})

    def __getitem__(self, name: str) -> LayerParams:
        return self.layers[name]

    def __contains__(self, name: str) -> bool:
        return name in self.layers

    def __iter__(self) -> Iterator[str]:
        return iter(self.layers)

    def items(self):
        return self.layers.items()

    def names(self, kind: Optional[LayerKind] = None, heads: Optional[bool] = None) -> list[str]:
        return [name for name, p in self.layers.items()
                if (kind is None or p.kind is kind) and (heads is None or p.is_head == heads)]

    def set_frozen(self, name: str, frozen: bool) -> None:
        self.layers[name].frozen = frozen

    def copy(self) -> "ParamStore":
        return ParamStore(copy.deepcopy(self.layers))

    def trunk_only(self) -> "ParamStore":
        return ParamStore({name: p for name, p in copy.deepcopy(self.layers).items() if not p.is_head})

    def astype(self, dtype) -> "ParamStore":
        store = self.copy()
        for p in store.layers.values():
            p.tensors = {k: v.astype(dtype) for k, v in p.tensors.items()}
            p.velocity = {k: v.astype(dtype) for k, v in p.velocity.items()}
        return store

    def parameter_count(self) -> int:
        return sum(t.size for p in self.layers.values() for t in p.tensors.values())

    def equals(self, other: "ParamStore") -> bool:
        """Bit-exact comparison of names, flags, tensors and velocities."""
        if list(self.layers) != list(other.layers):
            return False
        for name, mine in self.layers.items():
            theirs = other.layers[name]
            if (mine.kind, mine.frozen, mine.is_head) != (theirs.kind, theirs.frozen, theirs.is_head):
                return False
            for attr in ("tensors", "velocity"):
                a, b = getattr(mine, attr), getattr(theirs, attr)
                if a.keys() != b.keys():
                    return False
                if any(a[k].shape != b[k].shape or a[k].tobytes() != b[k].tobytes() for k in a):
                    return False
        return True


def init_params(spec: NetworkSpec, rng: np.random.Generator, scale: float = INIT_SCALE,
                dtype=np.float64) -> ParamStore:
    """Weights ~ N(0, scale^2), biases and velocities zero, nothing frozen."""
    if scale < 0:
        raise ParameterError(f"Initialization scale must be >= 0, got {scale}")
    store = ParamStore()
    for name, kind, shapes, is_head in learnable_layout(spec):
        tensors = {
            "weight": rng.normal(0.0, scale, size=shapes["weight"]).astype(dtype),
            "bias": np.zeros(shapes["bias"], dtype=dtype),
        }
        velocity = {key: np.zeros_like(value) for key, value in tensors.items()}
        store.layers[name] = LayerParams(kind, tensors, velocity, frozen=False, is_head=is_head)
    return store


def validate_params(spec: NetworkSpec, params: ParamStore) -> None:
    """Raise ConfigurationError unless ``params`` has exactly the layers and shapes ``spec`` needs."""
    expected = {name: shapes for name, _, shapes, _ in learnable_layout(spec)}
    if set(expected) != set(params.layers):
        missing = sorted(set(expected) - set(params.layers))
        extra = sorted(set(params.layers) - set(expected))
        raise ConfigurationError(f"Parameters do not match the network: missing {missing}, unexpected {extra}")
    for name, shapes in expected.items():
        for key, shape in shapes.items():
            actual = params[name].tensors[key].shape
            if actual != shape:
                raise ConfigurationError(f"Layer {name} {key}: expected shape {shape}, got {actual}")


### Running a network ###

@dataclass
class TrunkPass:
    features: Tensor                # [B, D]
    output_shape: Shape             # batched trunk output before flattening
    contexts: list[LayerContext] = field(default_factory=list)


def forward_trunk(spec: NetworkSpec, params: ParamStore, inputs: Tensor, mode: Mode,
                  rng: Optional[np.random.Generator] = None) -> TrunkPass:
    """Run a batch ``[B, C, h, w]`` through the shared trunk."""
    x = inputs
    contexts = []
    for layer in spec.trunk:
        tensors = params[layer.name].tensors if layer.learnable else None
        x, ctx = dcn_layers.forward(layer, x, tensors, mode, rng)
        contexts.append(ctx)
    return TrunkPass(x.reshape(x.shape[0], -1), x.shape, contexts)


def backward_trunk(spec: NetworkSpec, trunk_pass: TrunkPass, grad_features: Tensor) -> dict[str, dict[str, Tensor]]:
    grad = grad_features.reshape(trunk_pass.output_shape)
    grads: dict[str, dict[str, Tensor]] = {}
    for layer, ctx in zip(reversed(spec.trunk), reversed(trunk_pass.contexts)):
        grad, layer_grads = layers.backward(ctx, grad)
        if layer.learnable:
            grads[layer.name] = layer_grads
    return grads


def head_forward(spec: NetworkSpec, params: ParamStore, head_name: str, features: Tensor) -> tuple[Tensor, LayerContext]:
    head = spec.head(head_name)
    tensors = params[head.param_name].tensors
    return layers.fc_forward(features, FcParams(tensors["weight"], tensors["bias"]))


def head_scores(head: HeadSpec, logits: Tensor) -> Tensor:
    """Post-activation confidence: softmax for single-label heads, sigmoid for multi-label heads."""
    if head.label_mode is LabelMode.SINGLE:
        return layers.softmax(logits)
    return layers.sigmoid(logits)


def head_loss(head: HeadSpec, logits: Tensor, labels: Any) -> tuple[Tensor, Tensor]:
    """Per-sample losses [B] and logit gradients [B, n] for a batch of one head's samples."""
    if head.label_mode is LabelMode.SINGLE:
        return layers.softmax_xent(logits, np.asarray(labels, dtype=np.int64))
    return layers.sigmoid_bce(logits, np.asarray(labels, dtype=logits.dtype))


def predict_scores(spec: NetworkSpec, params: ParamStore, head_name: str, inputs: Tensor,
                   batch_size: int = 64) -> Tensor:
    """Eval-mode head scores for a batch of preprocessed crops."""
    head = spec.head(head_name)
    rows = []
    for start in range(0, inputs.shape[0], batch_size):
        trunk_pass = forward_trunk(spec, params, inputs[start:start + batch_size], Mode.EVAL)
        logits, _ = head_forward(spec, params, head_name, trunk_pass.features)
        rows.append(head_scores(head, logits))
    return np.concatenate(rows, axis=0)


### Checkpoints ###

_PREAMBLE = struct.Struct("<II")  # version, header length


def save_checkpoint(spec: NetworkSpec, params: ParamStore, path: PathLike) -> None:
    """Self-describing checkpoint: magic, JSON header (spec + layer table), then raw tensors.

    The byte stream is a pure function of (spec, params).
    """
    header_layers = []
    blobs = []
    for name, p in params.items():
        entry = {"name": name, "kind": p.kind.value, "frozen": p.frozen, "head": p.is_head, "tensors": [], "velocity": []}
        for attr in ("tensors", "velocity"):
            for key in sorted(getattr(p, attr)):
                tensor = getattr(p, attr)[key]
                entry[attr].append({"name": key, "shape": list(tensor.shape)})
                blobs.append(tensor_core.encode(tensor))
        header_layers.append(entry)

    header = json.dumps({"spec": spec.to_dict(), "layers": header_layers}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = CHECKPOINT_MAGIC + _PREAMBLE.pack(CHECKPOINT_VERSION, len(header)) + header + b"".join(blobs)
    Path(path).write_bytes(payload)
    logger.info(f"Saved checkpoint {path} ({len(header_layers)} learnable layers, {params.parameter_count()} parameters)")


def load_checkpoint(path: PathLike) -> tuple[NetworkSpec, ParamStore]:
    buffer = Path(path).read_bytes()
    if not buffer.startswith(CHECKPOINT_MAGIC):
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    try:
        version, header_length = _PREAMBLE.unpack_from(buffer, offset)
    except struct.error as e:
        raise FormatError(f"{path}: truncated checkpoint preamble") from e
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    offset += _PREAMBLE.size
    if offset + header_length > len(buffer):
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(buffer[offset:offset + header_length].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: corrupt checkpoint header ({e})") from e
    offset += header_length

    store = ParamStore()
    try:
        for entry in header["layers"]:
            found: dict[str, dict[str, Tensor]] = {"tensors": {}, "velocity": {}}
            for attr in ("tensors", "velocity"):
                for described in entry[attr]:
                    tensor, offset = tensor_core.decode(buffer, offset)
                    if list(tensor.shape) != described["shape"]:
                        raise FormatError(f"{path}: {entry['name']}.{described['name']} has shape {tensor.shape}, header says {described['shape']}")
                    found[attr][described["name"]] = tensor
            store.layers[entry["name"]] = LayerParams(
                LayerKind(entry["kind"]), found["tensors"], found["velocity"], bool(entry["frozen"]), bool(entry["head"]))
    except FormatError:
        raise
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: corrupt checkpoint layer table ({e!r})") from e
    if offset != len(buffer):
        raise FormatError(f"{path}: {len(buffer) - offset} trailing bytes")
    return spec, store
