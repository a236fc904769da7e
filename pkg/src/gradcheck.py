"""Central finite-difference checks for every layer and loss."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

import layers
from layer_registry import Mode
from layers import ConvParams, FcParams, LayerContext
from tensor_core import Tensor
from utils.constants import GRADCHECK_STEP, GRADCHECK_TOLERANCE

logger = logging.getLogger(__name__)

BackwardFn = Callable[[LayerContext, Tensor], tuple[Tensor, dict[str, Tensor]]]


@dataclass(frozen=True)
class GradCheckResult:
    name: str
    max_relative_error: float
    passed: bool


def relative_error(analytic: Tensor, numeric: Tensor) -> float:
    denominator = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-5)
    return float(np.max(np.abs(analytic - numeric) / denominator))


def numeric_gradient(objective: Callable[[], float], x: Tensor, step: float = GRADCHECK_STEP) -> Tensor:
    """Central differences of ``objective`` w.r.t. every element of ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = x[idx]
        x[idx] = original + step
        plus = objective()
        x[idx] = original - step
        minus = objective()
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * step)
    return grad


def _check_layer(name: str, forward: Callable[[], tuple[Tensor, LayerContext]],
                 wrt: dict[str, Tensor], upstream: Tensor, step: float,
                 backward: BackwardFn) -> float:
    """Compare backward() against finite differences of sum(forward() * upstream)."""
    _, ctx = forward()
    dx, grads = backward(ctx, upstream)
    analytic = {"input": dx, **grads}

    def objective() -> float:
        return float(np.sum(forward()[0] * upstream))

    worst = 0.0
    for key, tensor in wrt.items():
        worst = max(worst, relative_error(analytic[key], numeric_gradient(objective, tensor, step)))
    logger.debug(f"gradcheck {name}: max relative error {worst:.3e}")
    return worst


def _distinct(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    """Values at least 0.05 apart so a finite-difference step never flips a max or a ReLU."""
    n = int(np.prod(shape))
    values = (rng.permutation(n) - n / 2 + 0.5) * 0.05
    return values.reshape(shape).astype(np.float64)


def gradient_check_suite(rng: Optional[np.random.Generator] = None, step: float = GRADCHECK_STEP,
                         tolerance: float = GRADCHECK_TOLERANCE,
                         backward_overrides: Optional[dict[str, BackwardFn]] = None) -> list[GradCheckResult]:
    """Finite-difference check of every layer type and both losses in float64.

    ``backward_overrides`` maps a check name to a replacement backward
    function; used to verify that a faulty backward is caught.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    overrides = backward_overrides or {}
    errors: dict[str, float] = {}

    def backward_for(name: str) -> BackwardFn:
        return overrides.get(name, layers.backward)

    # Convolution, padded stride 1 and unpadded stride 2
    for name, stride, padding in (("conv", 1, 1), ("conv_strided", 2, 0)):
        x = rng.normal(size=(2, 2, 6, 6))
        kernels = rng.normal(size=(3, 2, 3, 3))
        bias = rng.normal(size=3)
        out_shape = layers.conv2d_forward(x, ConvParams(kernels, bias, stride, padding))[0].shape
        errors[name] = _check_layer(
            name, lambda: layers.conv2d_forward(x, ConvParams(kernels, bias, stride, padding)),
            {"input": x, "weight": kernels, "bias": bias}, rng.normal(size=out_shape), step, backward_for(name))

    x = _distinct(rng, (2, 2, 6, 6))
    errors["maxpool"] = _check_layer(
        "maxpool", lambda: layers.maxpool_forward(x, 2, 2), {"input": x},
        rng.normal(size=(2, 2, 3, 3)), step, backward_for("maxpool"))

    x_relu = _distinct(rng, (3, 7))
    errors["relu"] = _check_layer(
        "relu", lambda: layers.relu_forward(x_relu), {"input": x_relu},
        rng.normal(size=(3, 7)), step, backward_for("relu"))

    x_fc = rng.normal(size=(3, 4))
    weight = rng.normal(size=(5, 4))
    fc_bias = rng.normal(size=5)
    errors["fc"] = _check_layer(
        "fc", lambda: layers.fc_forward(x_fc, FcParams(weight, fc_bias)),
        {"input": x_fc, "weight": weight, "bias": fc_bias}, rng.normal(size=(3, 5)), step, backward_for("fc"))

    x_drop = rng.normal(size=(4, 6))
    mask = layers.dropout(x_drop, 0.5, Mode.TRAIN, rng)[1].cache["mask"]
    errors["dropout"] = _check_layer(
        "dropout", lambda: layers.dropout(x_drop, 0.5, Mode.TRAIN, rng, mask=mask), {"input": x_drop},
        rng.normal(size=(4, 6)), step, backward_for("dropout"))

    logits = rng.normal(size=(4, 5))
    labels = rng.integers(0, 5, size=4)
    _, grad = layers.softmax_xent(logits, labels)
    errors["softmax_xent"] = relative_error(
        grad, numeric_gradient(lambda: float(np.sum(layers.softmax_xent(logits, labels)[0])), logits, step))

    logits_bce = rng.normal(size=(4, 5))
    targets = rng.integers(0, 2, size=(4, 5)).astype(np.float64)
    _, grad = layers.sigmoid_bce(logits_bce, targets)
    errors["sigmoid_bce"] = relative_error(
        grad, numeric_gradient(lambda: float(np.sum(layers.sigmoid_bce(logits_bce, targets)[0])), logits_bce, step))

    results = [GradCheckResult(name, err, err < tolerance) for name, err in errors.items()]
    for result in results:
        if not result.passed:
            logger.warning(f"Gradient check failed for {result.name}: {result.max_relative_error:.3e} >= {tolerance:g}")
    return results
