from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Any, Callable, Dict, List, Optional

from utils.exceptions import ConfigurationError, ParameterError


class LayerKind(Enum):
    CONV = "conv"
    MAXPOOL = "maxpool"
    RELU = "relu"
    FC = "fc"
    DROPOUT = "dropout"


class LabelMode(Enum):
    SINGLE = "single"   # one class index per sample, softmax head
    MULTI = "multi"     # multi-hot target, per-class sigmoid head


class Mode(Enum):
    TRAIN = "train"
    EVAL = "eval"


@dataclass(frozen=True)
class LayerSpec:
    """Specification for one trunk layer"""
    name: str
    kind: LayerKind
    kernels: int = 0        # conv: kernel count K
    width: int = 0          # conv: kernel width N_W
    stride: int = 1         # conv / maxpool
    padding: int = 0        # conv
    pool_size: int = 0      # maxpool
    units: int = 0          # fc
    rate: float = 0.0       # dropout

    def __post_init__(self):
        if self.kind is LayerKind.CONV:
            if self.kernels < 1 or self.width < 1 or self.stride < 1 or self.padding < 0:
                raise ConfigurationError(f"Invalid conv layer {self.name}: {self}")
        elif self.kind is LayerKind.MAXPOOL:
            if self.pool_size < 1 or self.stride < 1:
                raise ConfigurationError(f"Invalid pooling layer {self.name}: {self}")
        elif self.kind is LayerKind.FC:
            if self.units < 1:
                raise ConfigurationError(f"Invalid fully connected layer {self.name}: {self}")
        elif self.kind is LayerKind.DROPOUT:
            if not 0.0 <= self.rate < 1.0:
                raise ParameterError(f"Dropout rate must be in [0, 1), got {self.rate}")

    @property
    def learnable(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.FC)

    def describe(self) -> str:
        """One-line human readable description"""
        if self.kind is LayerKind.CONV:
            return f"conv {self.kernels}@{self.width}x{self.width} s{self.stride} p{self.padding}"
        if self.kind is LayerKind.MAXPOOL:
            return f"pool{self.pool_size} s{self.stride}"
        if self.kind is LayerKind.FC:
            return f"fc{self.units}"
        if self.kind is LayerKind.DROPOUT:
            return f"dropout {self.rate:g}"
        return self.kind.value

    def to_dict(self) -> dict[str, Any]:
        fields = {"name": self.name, "kind": self.kind.value}
        for key in ("kernels", "width", "stride", "padding", "pool_size", "units", "rate"):
            fields[key] = getattr(self, key)
        return fields

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LayerSpec":
        return cls(**{**data, "kind": LayerKind(data["kind"])})


@dataclass(frozen=True)
class HeadSpec:
    """An output head attached to the last shared fully connected layer"""
    name: str
    class_count: int
    label_mode: LabelMode = LabelMode.SINGLE

    def __post_init__(self):
        minimum = 2 if self.label_mode is LabelMode.SINGLE else 1
        if self.class_count < minimum:
            raise ConfigurationError(
                f"Head '{self.name}' ({self.label_mode.value}-label) needs >= {minimum} classes, got {self.class_count}")

    @property
    def param_name(self) -> str:
        return f"head:{self.name}"

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "class_count": self.class_count, "label_mode": self.label_mode.value}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HeadSpec":
        return cls(data["name"], int(data["class_count"]), LabelMode(data["label_mode"]))


Shape = tuple[int, ...]


@dataclass(frozen=True)
class LayerHandler:
    kind: LayerKind
    forward: Callable[..., Any]                        # (spec, x, params, mode, rng) -> (y, ctx)
    output_shape: Callable[[LayerSpec, Shape], Shape]  # per-sample shapes, no batch axis
    param_shapes: Callable[[LayerSpec, Shape], Dict[str, Shape]]
    description: str = ""


class LayerRegistry:
    """Registry for layer kinds: how they run, what shape they produce and what they learn"""

    def __init__(self):
        self.handlers: Dict[LayerKind, LayerHandler] = {}

    def register_layer(
        self,
        kind: LayerKind,
        forward: Callable[..., Any],
        output_shape: Callable[[LayerSpec, Shape], Shape],
        param_shapes: Optional[Callable[[LayerSpec, Shape], Dict[str, Shape]]] = None,
        description: str = "",
    ) -> "LayerRegistry":
        """Register the handlers of one layer kind"""
        self.handlers[kind] = LayerHandler(kind, forward, output_shape, param_shapes or (lambda spec, shape: {}), description)
        return self

    def get_handler(self, kind: LayerKind) -> LayerHandler:
        if kind not in self.handlers:
            raise ConfigurationError(f"Layer kind '{kind.value}' not registered. Available: {self.list_all_kinds()}")
        return self.handlers[kind]

    def forward(self, spec: LayerSpec, x, params, mode: Mode, rng):
        return self.get_handler(spec.kind).forward(spec, x, params, mode, rng)

    def output_shape(self, spec: LayerSpec, input_shape: Shape) -> Shape:
        return self.get_handler(spec.kind).output_shape(spec, input_shape)

    def param_shapes(self, spec: LayerSpec, input_shape: Shape) -> Dict[str, Shape]:
        return self.get_handler(spec.kind).param_shapes(spec, input_shape)

    def list_all_kinds(self) -> List[str]:
        return sorted(kind.value for kind in self.handlers)


# Populated by layers.py at import time
dcn_layers = LayerRegistry()
