"""Image-to-video transfer: transplant pre-trained trunk parameters and choose which layers keep learning."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Union

import numpy as np
import pandas as pd

import netspec
import trainer
from layer_registry import LayerKind
from netspec import LayerParams, NetworkSpec, ParamStore
from tensor_core import Tensor
from trainer import MetricsLog, TrainConfig, TrainHistory, TrainingData
from utils.constants import INIT_SCALE
from utils.exceptions import IncompatibleTransplantError, ShapeError

logger = logging.getLogger(__name__)

Source = Union[str, Path, tuple[NetworkSpec, ParamStore]]


class FreezePolicy(Enum):
    FC_PLUS_CONV = "fc+conv"    # update everything
    FC_ONLY = "fc"              # conv kernels stay fixed

    @property
    def label(self) -> str:
        return "FC" if self is FreezePolicy.FC_ONLY else "FC+CONV"


class TransplantAction(Enum):
    COPIED = "copied"
    REINITIALIZED = "reinitialized"
    SKIPPED = "skipped"         # source layer without a counterpart in the target


@dataclass(frozen=True)
class TransplantEntry:
    action: TransplantAction
    target_layer: Optional[str]
    source_layer: Optional[str]
    target_shape: Optional[tuple[int, ...]] = None
    source_shape: Optional[tuple[int, ...]] = None


@dataclass
class TransplantReport:
    entries: list[TransplantEntry] = field(default_factory=list)

    def action_for(self, target_layer: str) -> TransplantAction:
        for entry in self.entries:
            if entry.target_layer == target_layer:
                return entry.action
        raise KeyError(target_layer)

    def target_layers(self, action: Optional[TransplantAction] = None) -> list[str]:
        return [e.target_layer for e in self.entries
                if e.target_layer is not None and (action is None or e.action is action)]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([{
            "target": e.target_layer or "-", "source": e.source_layer or "-", "action": e.action.value,
            "target_shape": "x".join(map(str, e.target_shape)) if e.target_shape else "-",
            "source_shape": "x".join(map(str, e.source_shape)) if e.source_shape else "-",
        } for e in self.entries])

    def to_text(self) -> str:
        lines = [f"{e.action.value:<14} target={e.target_layer or '-'} source={e.source_layer or '-'} "
                 f"target_shape={e.target_shape} source_shape={e.source_shape}" for e in self.entries]
        return "\n".join(lines) + "\n"


def _weight_shape(shapes: dict[str, tuple[int, ...]]) -> tuple[int, ...]:
    return tuple(shapes["weight"])


def _describe(layer) -> str:
    if layer is None:
        return "(none)"
    name, kind, shapes = layer
    return f"{name} {kind.value} {_weight_shape(shapes)}"


def _resolve_source(source: Source) -> tuple[NetworkSpec, ParamStore]:
    if isinstance(source, (str, Path)):
        return netspec.load_checkpoint(source)
    return source


def transplant(source: Source, target_spec: NetworkSpec, rng: np.random.Generator,
               scale: float = INIT_SCALE) -> tuple[ParamStore, TransplantReport]:
    """Copy every position-and-shape matching trunk layer of ``source`` into a fresh ``target_spec`` store.

    Conv layers must all match; fully connected trunk layers that differ and
    every head are re-initialized. Velocities start at zero and nothing is
    frozen.
    """
    source_spec, source_params = _resolve_source(source)
    params = netspec.init_params(target_spec, rng, scale)
    report = TransplantReport()

    source_trunk = [(n, k, s) for n, k, s, head in netspec.learnable_layout(source_spec) if not head]
    target_trunk = [(n, k, s) for n, k, s, head in netspec.learnable_layout(target_spec) if not head]
    conv_positions = max(sum(k is LayerKind.CONV for _, k, _ in source_trunk),
                         sum(k is LayerKind.CONV for _, k, _ in target_trunk))

    for position in range(conv_positions):
        src = source_trunk[position] if position < len(source_trunk) else None
        tgt = target_trunk[position] if position < len(target_trunk) else None
        if src is None or tgt is None or src[1] is not tgt[1] or src[2] != tgt[2]:
            name = tgt[0] if tgt is not None else src[0]
            detail = f"source {_describe(src)} vs target {_describe(tgt)}"
            raise IncompatibleTransplantError(name, detail, report)

    for position, (name, kind, shapes) in enumerate(target_trunk):
        src = source_trunk[position] if position < len(source_trunk) else None
        src_shape = _weight_shape(src[2]) if src else None
        if src is not None and src[1] is kind and src[2] == shapes:
            copied = source_params[src[0]]
            params.layers[name] = LayerParams(
                kind,
                {key: np.array(value, copy=True) for key, value in copied.tensors.items()},
                {key: np.zeros_like(value) for key, value in copied.tensors.items()},
            )
            report.entries.append(TransplantEntry(TransplantAction.COPIED, name, src[0], _weight_shape(shapes), src_shape))
        else:
            report.entries.append(TransplantEntry(TransplantAction.REINITIALIZED, name, src[0] if src else None,
                                                  _weight_shape(shapes), src_shape))
        logger.debug(f"transplant {name}: {report.entries[-1].action.value}")

    for name, _, shapes, head in netspec.learnable_layout(target_spec):
        if head:
            report.entries.append(TransplantEntry(TransplantAction.REINITIALIZED, name, None, _weight_shape(shapes)))
    for name, _, shapes in source_trunk[len(target_trunk):]:
        report.entries.append(TransplantEntry(TransplantAction.SKIPPED, None, name, None, _weight_shape(shapes)))

    copied_count = len(report.target_layers(TransplantAction.COPIED))
    logger.info(f"Transplanted {copied_count} of {len(target_trunk)} trunk layers; heads re-initialized")
    return params, report


def apply_freeze_policy(params: ParamStore, policy: FreezePolicy) -> ParamStore:
    """FC_ONLY freezes every conv layer, FC_PLUS_CONV freezes nothing. Heads are never frozen."""
    for layer in params.layers.values():
        layer.frozen = policy is FreezePolicy.FC_ONLY and layer.kind is LayerKind.CONV and not layer.is_head
    return params


@dataclass
class TransferResult:
    spec: NetworkSpec
    params: ParamStore
    history: TrainHistory
    report: Optional[TransplantReport] = None


def transfer_train(source: Optional[Source], target_spec: NetworkSpec, data: TrainingData, policy: FreezePolicy,
                   cfg: TrainConfig, metrics_log: Optional[MetricsLog] = None, progress: bool = True) -> TransferResult:
    """Transplant (or random init when ``source`` is None), apply ``policy``, then train.

    ``data.auxiliary`` set turns the run into mixed-domain training.
    """
    rng = np.random.default_rng(cfg.seed)
    if source is None:
        params, report = netspec.init_params(target_spec, rng), None
    else:
        params, report = transplant(source, target_spec, rng)
    apply_freeze_policy(params, policy)
    logger.info(f"Fine-tuning with policy {policy.label}" + (" and mixed-domain batches" if data.auxiliary else ""))
    params, history = trainer.train(target_spec, params, data, cfg, metrics_log, progress)
    return TransferResult(target_spec, params, history, report)


def kernel_similarity(kernels_a: Tensor, kernels_b: Tensor) -> float:
    """Mean over kernels of ``a`` of the best absolute cosine similarity with any kernel of ``b``."""
    if kernels_a.shape[1:] != kernels_b.shape[1:]:
        raise ShapeError(f"Kernel banks {kernels_a.shape} and {kernels_b.shape} are not comparable")
    a = kernels_a.reshape(kernels_a.shape[0], -1)
    b = kernels_b.reshape(kernels_b.shape[0], -1)
    a = a / np.maximum(np.linalg.norm(a, axis=1, keepdims=True), 1e-12)
    b = b / np.maximum(np.linalg.norm(b, axis=1, keepdims=True), 1e-12)
    return float(np.mean(np.max(np.abs(a @ b.T), axis=1)))
