"""SGD with momentum, crop/mirror augmentation and mixed-domain multi-head training."""

from __future__ import annotations

import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterator, Optional, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

import layers
import metrics
import netspec
import tensor_core
from data_io import Dataset, Domain, ImageLoader
from layer_registry import HeadSpec, LabelMode, Mode
from layers import FcParams
from metrics import EvalReport
from netspec import NetworkSpec, ParamStore
from tensor_core import Tensor
from utils.constants import (
    BATCH_SIZE,
    EPOCHS,
    IMAGE_HEAD,
    LEARNING_RATE,
    LR_DECAY_FACTOR,
    METRICS_LOG_COLUMNS,
    MOMENTUM,
    VIDEO_HEAD,
    WEIGHT_DECAY,
)
from utils.exceptions import ConfigurationError, FormatError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

_DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = LEARNING_RATE
    momentum: float = MOMENTUM
    weight_decay: float = WEIGHT_DECAY
    epochs: int = EPOCHS            # full passes over the training set
    batch_size: int = BATCH_SIZE
    seed: int = 0
    lr_decay_step: int = 0          # 0 keeps the rate constant
    lr_decay_factor: float = LR_DECAY_FACTOR
    dtype: str = "float64"
    mean_subtraction: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr_decay_step < 0:
            raise ConfigurationError(f"Invalid epochs {self.epochs} / batch size {self.batch_size} / decay step {self.lr_decay_step}")
        if self.dtype not in _DTYPES:
            raise ConfigurationError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    def learning_rate_at(self, epoch: int) -> float:
        """Rate for a zero-based epoch under the optional step decay."""
        if not self.lr_decay_step:
            return self.learning_rate
        return self.learning_rate * self.lr_decay_factor ** (epoch // self.lr_decay_step)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass
class Batch:
    inputs: Tensor                          # [B, C, h, w]
    heads: list[str]
    labels: list[tuple[int, ...]]
    domains: list[Domain]

    def __post_init__(self):
        if self.inputs.ndim != 4:
            raise ShapeError(f"Batch inputs must be [B, C, h, w], got {self.inputs.shape}")
        if not len(self.heads) == len(self.labels) == len(self.domains) == self.inputs.shape[0]:
            raise ShapeError("Batch inputs, heads, labels and domains must have the same length")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def head_names(self) -> list[str]:
        return sorted(set(self.heads))

    def indices_for(self, head: str) -> np.ndarray:
        return np.array([i for i, name in enumerate(self.heads) if name == head], dtype=np.int64)


def head_targets(head: HeadSpec, labels: Sequence[tuple[int, ...]]) -> np.ndarray:
    """Class indices for single-label heads, multi-hot rows for multi-label heads."""
    if head.label_mode is LabelMode.SINGLE:
        if any(len(label) != 1 for label in labels):
            raise ParameterError(f"Head '{head.name}' is single-label but got label sets {labels}")
        return np.array([label[0] for label in labels], dtype=np.int64)
    return metrics.relevance_matrix(labels, head.class_count).astype(np.float64)


### Optimizer ###

def sgd_momentum_step(params: ParamStore, grads: dict[str, dict[str, Tensor]], cfg: TrainConfig,
                      learning_rate: Optional[float] = None) -> ParamStore:
    """v <- m v - lr (g + wd w); w <- w + v for every unfrozen tensor with a gradient, in place."""
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    for name, layer_grads in grads.items():
        if name not in params:
            raise ConfigurationError(f"Gradient for unknown layer '{name}'")
        layer = params[name]
        if layer.frozen:
            continue
        for key, g in layer_grads.items():
            w, v = layer.tensors[key], layer.velocity[key]
            if g.shape != w.shape:
                raise ShapeError(f"{name}.{key}: gradient {g.shape} vs parameter {w.shape}")
            v *= cfg.momentum
            v -= lr * (g + cfg.weight_decay * w)
            w += v
    return params


### Augmentation and batches ###

def augment_sample(image: Tensor, crop_resolution: int, rng: Optional[np.random.Generator],
                   mode: Union[Mode, str]) -> Tensor:
    """Train: random crop + mirror with probability 1/2. Eval: centre crop."""
    if image.ndim != 3:
        raise ShapeError(f"Expected a [C, H, W] image, got {image.shape}")
    _, H, W = image.shape
    r = crop_resolution
    if r > H or r > W or r < 1:
        raise ParameterError(f"Crop {r} does not fit a {H}x{W} image")

    if Mode(mode) is Mode.EVAL:
        return tensor_core.crop(image, (H - r) // 2, (W - r) // 2, r, r)
    top, left = int(rng.integers(0, H - r + 1)), int(rng.integers(0, W - r + 1))
    cropped = tensor_core.crop(image, top, left, r, r)
    return tensor_core.mirror_horizontal(cropped) if rng.random() < 0.5 else cropped


def prepare_inputs(images: Union[Tensor, Sequence[Tensor]], crop_resolution: int, rng: Optional[np.random.Generator],
                   mode: Union[Mode, str], mean_image: Optional[Tensor] = None, dtype=np.float64) -> Tensor:
    crops = np.stack([augment_sample(image, crop_resolution, rng, mode) for image in images])
    if mean_image is not None:
        crops = crops - mean_image
    return crops.astype(dtype, copy=False)


def compute_mean_image(dataset: Dataset, loader: ImageLoader, crop_resolution: int) -> Tensor:
    """Per-pixel mean of the centre crops of a training set."""
    total = None
    for entry in dataset:
        crop = augment_sample(loader.load(entry), crop_resolution, None, Mode.EVAL)
        total = crop.copy() if total is None else total + crop
    if total is None:
        raise ConfigurationError("Cannot compute a mean image of an empty dataset")
    return total / len(dataset)


def mixed_batch_iterator(image_ds: Optional[Dataset], frame_ds: Dataset, cfg: TrainConfig, rng: np.random.Generator,
                         *, loader: ImageLoader, crop_resolution: int, image_head: str = IMAGE_HEAD,
                         frame_head: str = VIDEO_HEAD, mean_image: Optional[Tensor] = None) -> Iterator[Batch]:
    """Batches of one epoch over every frame plus as many images, drawn at random.

    Images are subsampled without replacement when there are enough of
    them. An empty or missing image set gives frame-only batches.
    """
    if frame_ds is None or len(frame_ds) == 0:
        raise ConfigurationError("The frame dataset of a training epoch is empty")

    samples = [(entry, frame_head) for entry in frame_ds]
    if image_ds is not None and len(image_ds) > 0:
        count = len(frame_ds)
        picks = rng.choice(len(image_ds), size=count, replace=count > len(image_ds))
        samples += [(image_ds[int(i)], image_head) for i in picks]

    order = rng.permutation(len(samples))
    for start in range(0, len(order), cfg.batch_size):
        chunk = [samples[i] for i in order[start:start + cfg.batch_size]]
        images = [loader.load(entry) for entry, _ in chunk]
        inputs = prepare_inputs(images, crop_resolution, rng, Mode.TRAIN, mean_image, cfg.np_dtype)
        yield Batch(inputs, [head for _, head in chunk], [entry.labels for entry, _ in chunk],
                    [entry.domain for entry, _ in chunk])


### Gradients and steps ###

@dataclass
class GradientResult:
    losses: dict[str, float]                        # mean loss per head
    counts: dict[str, int]                          # samples per head
    grads: dict[str, dict[str, Tensor]] = field(default_factory=dict)


def compute_gradients(spec: NetworkSpec, params: ParamStore, batch: Batch, mode: Mode = Mode.TRAIN,
                      rng: Optional[np.random.Generator] = None, normalizer: Optional[int] = None) -> GradientResult:
    """Gradients of sum(per-sample loss) / normalizer (default: batch size).

    Each sample's loss uses its own head only; heads without samples get no
    gradient entry. The shared trunk runs once over the whole batch.
    """
    for name in batch.head_names():
        spec.head(name)
    scale = 1.0 / (normalizer or len(batch))

    trunk_pass = netspec.forward_trunk(spec, params, batch.inputs, mode, rng)
    features = trunk_pass.features
    grad_features = np.zeros_like(features)
    result = GradientResult({}, {})

    for name in batch.head_names():
        head = spec.head(name)
        idx = batch.indices_for(name)
        tensors = params[head.param_name].tensors
        logits, ctx = layers.fc_forward(features[idx], FcParams(tensors["weight"], tensors["bias"]))
        losses, grad_logits = netspec.head_loss(head, logits, head_targets(head, [batch.labels[i] for i in idx]))
        grad_input, head_grads = layers.backward(ctx, grad_logits * scale)
        grad_features[idx] += grad_input
        result.grads[head.param_name] = head_grads
        result.losses[name] = float(np.mean(losses))
        result.counts[name] = len(idx)

    result.grads.update(netspec.backward_trunk(spec, trunk_pass, grad_features))
    return result


def multi_head_step(spec: NetworkSpec, params: ParamStore, batch: Batch, cfg: TrainConfig,
                    rng: Optional[np.random.Generator] = None,
                    learning_rate: Optional[float] = None) -> tuple[dict[str, float], ParamStore]:
    """One forward/backward over a mixed batch followed by one optimizer step."""
    result = compute_gradients(spec, params, batch, Mode.TRAIN, rng)
    sgd_momentum_step(params, result.grads, cfg, learning_rate)
    return result.losses, params


### Evaluation during training ###

def evaluate_dataset(spec: NetworkSpec, params: ParamStore, dataset: Dataset, head_name: str, loader: ImageLoader,
                     batch_size: int = 64, mean_image: Optional[Tensor] = None, dtype=np.float64) -> EvalReport:
    """Eval-mode loss and ranking metrics of one head on centre crops."""
    head = spec.head(head_name)
    loss_sum, score_rows = 0.0, []
    for start in range(0, len(dataset), batch_size):
        entries = dataset.entries[start:start + batch_size]
        inputs = prepare_inputs([loader.load(e) for e in entries], spec.crop_resolution, None, Mode.EVAL, mean_image, dtype)
        trunk_pass = netspec.forward_trunk(spec, params, inputs, Mode.EVAL)
        logits, _ = netspec.head_forward(spec, params, head_name, trunk_pass.features)
        losses, _ = netspec.head_loss(head, logits, head_targets(head, [e.labels for e in entries]))
        loss_sum += float(np.sum(losses))
        score_rows.append(netspec.head_scores(head, logits))

    scores = np.concatenate(score_rows, axis=0)
    relevance = metrics.relevance_matrix(dataset.label_sets(), head.class_count)
    single = [e.labels[0] for e in dataset] if head.label_mode is LabelMode.SINGLE else None
    return metrics.evaluate_scores(scores, relevance, single, loss=loss_sum / len(dataset))


def heldout_metric(head: HeadSpec, report: EvalReport) -> float:
    """Top-1 accuracy for single-label heads, MAP for multi-label heads."""
    value = report.top1 if head.label_mode is LabelMode.SINGLE else report.map
    return math.nan if value is None else value


### Training loop ###

@dataclass
class TrainingData:
    primary: Dataset                        # sets the epoch size
    loader: ImageLoader
    primary_head: str = VIDEO_HEAD
    auxiliary: Optional[Dataset] = None     # subsampled to len(primary) every epoch
    auxiliary_head: str = IMAGE_HEAD
    heldout: Optional[Dataset] = None       # scored on primary_head


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    head: str
    train_loss: float
    heldout_loss: float = math.nan
    heldout_metric: float = math.nan


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    heldout_reports: list[EvalReport] = field(default_factory=list)
    mean_image: Optional[Tensor] = None     # set when training subtracted a mean crop

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([asdict(r) for r in self.records], columns=METRICS_LOG_COLUMNS)

    def last(self, head: str) -> Optional[EpochRecord]:
        rows = [r for r in self.records if r.head == head]
        return rows[-1] if rows else None


class MetricsLog:
    """Line-oriented CSV log: one row per (epoch, head)."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    def append(self, record: EpochRecord) -> None:
        row = pd.DataFrame([asdict(record)], columns=METRICS_LOG_COLUMNS)
        row.to_csv(self.path, mode="a", header=not self.path.exists(), index=False, float_format="%.10f")

    @staticmethod
    def read(path: Union[str, Path]) -> pd.DataFrame:
        frame = pd.read_csv(path)
        missing = [c for c in METRICS_LOG_COLUMNS if c not in frame.columns]
        if missing:
            raise FormatError(f"{path}: metrics log lacks columns {missing}")
        return frame


def train(spec: NetworkSpec, params: ParamStore, data: TrainingData, cfg: TrainConfig,
          metrics_log: Optional[MetricsLog] = None, progress: bool = True) -> tuple[ParamStore, TrainHistory]:
    """``cfg.epochs`` full passes of SGD with momentum; returns a new store and the per-epoch history."""
    history = TrainHistory()
    if cfg.epochs == 0:
        return params, history

    netspec.validate_params(spec, params)
    params = params.astype(cfg.np_dtype)
    rng = np.random.default_rng(cfg.seed)
    mean_image = compute_mean_image(data.primary, data.loader, spec.crop_resolution) if cfg.mean_subtraction else None
    history.mean_image = mean_image

    for epoch in tqdm(range(1, cfg.epochs + 1), desc="epochs", disable=not progress):
        lr = cfg.learning_rate_at(epoch - 1)
        loss_sums: dict[str, float] = defaultdict(float)
        counts: dict[str, int] = defaultdict(int)

        batches = mixed_batch_iterator(data.auxiliary, data.primary, cfg, rng, loader=data.loader,
                                       crop_resolution=spec.crop_resolution, image_head=data.auxiliary_head,
                                       frame_head=data.primary_head, mean_image=mean_image)
        for step, batch in enumerate(batches):
            result = compute_gradients(spec, params, batch, Mode.TRAIN, rng)
            sgd_momentum_step(params, result.grads, cfg, lr)
            for head, loss in result.losses.items():
                loss_sums[head] += loss * result.counts[head]
                counts[head] += result.counts[head]
            logger.debug(f"epoch {epoch} batch {step}: {result.losses}")

        heldout_loss = heldout_value = math.nan
        if data.heldout is not None and len(data.heldout) > 0:
            report = evaluate_dataset(spec, params, data.heldout, data.primary_head, data.loader,
                                      mean_image=mean_image, dtype=cfg.np_dtype)
            history.heldout_reports.append(report)
            heldout_loss, heldout_value = report.loss, heldout_metric(spec.head(data.primary_head), report)

        for head in sorted(loss_sums):
            own = head == data.primary_head
            record = EpochRecord(epoch, head, loss_sums[head] / counts[head],
                                 heldout_loss if own else math.nan, heldout_value if own else math.nan)
            history.records.append(record)
            if metrics_log is not None:
                metrics_log.append(record)
        logger.info(f"Epoch {epoch}/{cfg.epochs} lr={lr:g} " + ", ".join(
            f"{r.head}: train {r.train_loss:.4f} held-out {r.heldout_loss:.4f}" for r in history.records if r.epoch == epoch))

    return params, history
