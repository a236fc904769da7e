"""Forward and backward computation for every layer type, plus the two training losses.

Every forward op accepts either one sample or a batch with a leading batch
axis (``[C, H, W]`` or ``[B, C, H, W]`` for conv/pool, ``[in]`` or
``[B, ...]`` for fc) and returns the output in the same form together with a
``LayerContext`` that exactly one call to ``backward`` consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional, Union

import numpy as np

from layer_registry import LayerKind, LayerSpec, Mode, dcn_layers
from tensor_core import Tensor
from utils.exceptions import ParameterError, ShapeError


@dataclass(frozen=True)
class ConvParams:
    kernels: Tensor     # [K, C, N_W, N_W]
    bias: Tensor        # [K]
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise ShapeError(f"Kernels must be [K, C, N_W, N_W] with square N_W, got {self.kernels.shape}")
        if self.bias.shape != (self.kernels.shape[0],):
            raise ShapeError(f"Bias shape {self.bias.shape} does not match {self.kernels.shape[0]} kernels")
        if self.stride < 1 or self.padding < 0:
            raise ParameterError(f"Invalid stride {self.stride} / padding {self.padding}")

    @property
    def width(self) -> int:
        return self.kernels.shape[2]


@dataclass(frozen=True)
class FcParams:
    weight: Tensor      # [out, in]
    bias: Tensor        # [out]

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"Weight {self.weight.shape} / bias {self.bias.shape} mismatch")


@dataclass
class LayerContext:
    kind: LayerKind
    input_shape: tuple[int, ...]    # batched form
    output_shape: tuple[int, ...]   # batched form
    batched: bool
    cache: dict[str, Any] = field(default_factory=dict)
    consumed: bool = False


def _as_batch(x: Tensor, sample_rank: int) -> tuple[Tensor, bool]:
    if x.ndim == sample_rank:
        return x[None], False
    if x.ndim == sample_rank + 1:
        return x, True
    raise ShapeError(f"Expected rank {sample_rank} or {sample_rank + 1}, got shape {x.shape}")


def _restore(y: Tensor, batched: bool) -> Tensor:
    return y if batched else y[0]


def conv_output_size(size: int, width: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - width) // stride + 1


def pool_output_size(size: int, pool_size: int, stride: int) -> int:
    return (size - pool_size) // stride + 1


### im2col lowering ###

def im2col(x: Tensor, width: int, stride: int = 1, padding: int = 0) -> Tensor:
    """[B, C, H, W] -> [B * out_h * out_w, C * width * width] patch matrix."""
    B, C, H, W = x.shape
    out_h = conv_output_size(H, width, stride, padding)
    out_w = conv_output_size(W, width, stride, padding)

    img = np.pad(x, [(0, 0), (0, 0), (padding, padding), (padding, padding)], "constant")
    col = np.zeros((B, C, width, width, out_h, out_w), dtype=x.dtype)
    for y in range(width):
        y_max = y + stride * out_h
        for x_ in range(width):
            x_max = x_ + stride * out_w
            col[:, :, y, x_, :, :] = img[:, :, y:y_max:stride, x_:x_max:stride]

    # (B, C, kh, kw, out_h, out_w) -> (B, out_h, out_w, C, kh, kw)
    return col.transpose(0, 4, 5, 1, 2, 3).reshape(B * out_h * out_w, -1)


def col2im(col: Tensor, input_shape: tuple[int, ...], width: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Adjoint of ``im2col``: scatter-add patch rows back into a [B, C, H, W] image."""
    B, C, H, W = input_shape
    out_h = conv_output_size(H, width, stride, padding)
    out_w = conv_output_size(W, width, stride, padding)

    col = col.reshape(B, out_h, out_w, C, width, width).transpose(0, 3, 4, 5, 1, 2)
    img = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=col.dtype)
    for y in range(width):
        y_max = y + stride * out_h
        for x_ in range(width):
            x_max = x_ + stride * out_w
            img[:, :, y:y_max:stride, x_:x_max:stride] += col[:, :, y, x_, :, :]
    return img[:, :, padding:padding + H, padding:padding + W]


### Convolution ###

def _check_conv(input_shape: tuple[int, ...], p: ConvParams) -> tuple[int, int]:
    C, H, W = input_shape
    if C != p.kernels.shape[1]:
        raise ShapeError(f"Input has {C} channels, kernels expect {p.kernels.shape[1]}")
    if p.width > H + 2 * p.padding or p.width > W + 2 * p.padding:
        raise ShapeError(f"Kernel width {p.width} exceeds padded input {H}x{W} (pad {p.padding})")
    return conv_output_size(H, p.width, p.stride, p.padding), conv_output_size(W, p.width, p.stride, p.padding)


def conv2d_forward(input: Tensor, p: ConvParams) -> tuple[Tensor, LayerContext]:
    x, batched = _as_batch(input, 3)
    B = x.shape[0]
    out_h, out_w = _check_conv(x.shape[1:], p)
    K = p.kernels.shape[0]

    col = im2col(x, p.width, p.stride, p.padding)
    out = col @ p.kernels.reshape(K, -1).T + p.bias
    out = np.ascontiguousarray(out.reshape(B, out_h, out_w, K).transpose(0, 3, 1, 2))

    ctx = LayerContext(LayerKind.CONV, x.shape, out.shape, batched, {"col": col, "params": p})
    return _restore(out, batched), ctx


def _conv2d_backward(ctx: LayerContext, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    p: ConvParams = ctx.cache["params"]
    K = p.kernels.shape[0]
    dy_rows = dy.transpose(0, 2, 3, 1).reshape(-1, K)

    d_kernels = (dy_rows.T @ ctx.cache["col"]).reshape(p.kernels.shape)
    d_bias = dy_rows.sum(axis=0)
    d_col = dy_rows @ p.kernels.reshape(K, -1)
    dx = col2im(d_col, ctx.input_shape, p.width, p.stride, p.padding)
    return dx, {"weight": d_kernels, "bias": d_bias}


def _dense_tie_index(input_shape: tuple[int, int, int], p: ConvParams) -> np.ndarray:
    """Integer matrix of the dense conv map: entry = flat kernel index it is tied to, -1 where zero."""
    C, H, W = input_shape
    out_h, out_w = _check_conv(input_shape, p)
    K, _, nw, _ = p.kernels.shape

    tie = np.full((K * out_h * out_w, C * H * W), -1, dtype=np.int64)
    channels = np.arange(C)
    for k in range(K):
        for i in range(out_h):
            for j in range(out_w):
                row = (k * out_h + i) * out_w + j
                for r in range(nw):
                    y = i * p.stride - p.padding + r
                    if not 0 <= y < H:
                        continue
                    for s in range(nw):
                        x = j * p.stride - p.padding + s
                        if not 0 <= x < W:
                            continue
                        # local response: only the window (y, x) of every channel is nonzero
                        # tied weight: the same kernel entry (k, c, r, s) at every (i, j)
                        tie[row, channels * H * W + y * W + x] = ((k * C + channels) * nw + r) * nw + s
    return tie


def conv2d_as_dense(input_shape: tuple[int, int, int], p: ConvParams) -> Tensor:
    """Dense matrix ``M`` with ``M @ flatten(x) + dense_conv_bias`` == ``flatten(conv2d(x))``."""
    tie = _dense_tie_index(tuple(input_shape), p)
    return np.where(tie >= 0, p.kernels.reshape(-1)[np.maximum(tie, 0)], 0.0)


def dense_conv_bias(p: ConvParams, output_hw: tuple[int, int]) -> Tensor:
    return np.repeat(p.bias, output_hw[0] * output_hw[1])


def conv2d_backward_via_dense(input: Tensor, p: ConvParams, upstream: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Gradient oracle through the dense construction: (d_input, d_kernels, d_bias) for one sample."""
    tie = _dense_tie_index(input.shape, p)
    matrix = np.where(tie >= 0, p.kernels.reshape(-1)[np.maximum(tie, 0)], 0.0)
    dy = upstream.reshape(-1)
    dx = (matrix.T @ dy).reshape(input.shape)

    mask = tie >= 0
    outer = np.outer(dy, input.reshape(-1))
    d_kernels = np.bincount(tie[mask], weights=outer[mask], minlength=p.kernels.size).reshape(p.kernels.shape)
    d_bias = upstream.reshape(p.kernels.shape[0], -1).sum(axis=1)
    return dx, d_kernels, d_bias


### Pooling ###

def maxpool_forward(input: Tensor, size: int, stride: int) -> tuple[Tensor, LayerContext]:
    x, batched = _as_batch(input, 3)
    B, K, H, W = x.shape
    if size < 1 or stride < 1:
        raise ParameterError(f"Invalid pool size {size} / stride {stride}")
    if size > H or size > W:
        raise ShapeError(f"Pool size {size} larger than input {H}x{W}")
    out_h, out_w = pool_output_size(H, size, stride), pool_output_size(W, size, stride)

    col = im2col(x.reshape(B * K, 1, H, W), size, stride)
    arg = np.argmax(col, axis=1)    # first maximum in row-major window order
    out = col[np.arange(col.shape[0]), arg].reshape(B, K, out_h, out_w)

    ctx = LayerContext(LayerKind.MAXPOOL, x.shape, out.shape, batched,
                       {"argmax": arg, "col_shape": col.shape, "size": size, "stride": stride})
    return _restore(out, batched), ctx


def _maxpool_backward(ctx: LayerContext, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    B, K, H, W = ctx.input_shape
    d_col = np.zeros(ctx.cache["col_shape"], dtype=dy.dtype)
    d_col[np.arange(d_col.shape[0]), ctx.cache["argmax"]] = dy.reshape(-1)
    dx = col2im(d_col, (B * K, 1, H, W), ctx.cache["size"], ctx.cache["stride"])
    return dx.reshape(ctx.input_shape), {}


### Activations ###

def relu(input: Tensor) -> Tensor:
    """f(x) = x * I(x > 0)"""
    return np.maximum(input, 0.0)


def relu_forward(input: Tensor) -> tuple[Tensor, LayerContext]:
    ctx = LayerContext(LayerKind.RELU, input.shape, input.shape, True, {"mask": input > 0})
    return relu(input), ctx


def _relu_backward(ctx: LayerContext, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    return dy * ctx.cache["mask"], {}


### Fully connected ###

def fc_forward(input: Tensor, p: FcParams) -> tuple[Tensor, LayerContext]:
    batched = input.ndim > 1
    x = input.reshape(input.shape[0], -1) if batched else input[None]
    if x.shape[1] != p.weight.shape[1]:
        raise ShapeError(f"Input length {x.shape[1]} does not match weight {p.weight.shape}")

    out = x @ p.weight.T + p.bias
    ctx = LayerContext(LayerKind.FC, input.shape if batched else x.shape, out.shape, batched,
                       {"x": x, "params": p})
    return _restore(out, batched), ctx


def _fc_backward(ctx: LayerContext, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    p: FcParams = ctx.cache["params"]
    d_weight = dy.T @ ctx.cache["x"]
    d_bias = dy.sum(axis=0)
    dx = (dy @ p.weight).reshape(ctx.input_shape)
    return dx, {"weight": d_weight, "bias": d_bias}


### Dropout ###

def dropout(input: Tensor, rate: float, mode: Union[Mode, str], rng: Optional[np.random.Generator],
            mask: Optional[Tensor] = None) -> tuple[Tensor, LayerContext]:
    """Inverted dropout: survivors scaled by 1/(1-rate) at train time, identity at eval time."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"Dropout rate must be in [0, 1), got {rate}")
    mode = Mode(mode)

    if mode is Mode.TRAIN and rate > 0.0 and mask is None:
        mask = (rng.random(input.shape) >= rate) / (1.0 - rate)
    if mode is Mode.EVAL or rate == 0.0:
        mask = None

    out = input * mask if mask is not None else input.copy()
    ctx = LayerContext(LayerKind.DROPOUT, input.shape, input.shape, True, {"mask": mask})
    return out, ctx


def _dropout_backward(ctx: LayerContext, dy: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    mask = ctx.cache["mask"]
    return (dy * mask if mask is not None else dy.copy()), {}


### Backward dispatch ###

_BACKWARD = {
    LayerKind.CONV: _conv2d_backward,
    LayerKind.MAXPOOL: _maxpool_backward,
    LayerKind.RELU: _relu_backward,
    LayerKind.FC: _fc_backward,
    LayerKind.DROPOUT: _dropout_backward,
}


def backward(context: LayerContext, upstream_grad: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    """Reverse-mode gradients for the forward pass that produced ``context``.

    Returns the gradient w.r.t. the layer input (same form as the forward
    input) and a dict of parameter gradients keyed ``weight``/``bias``.
    """
    if context.consumed:
        raise ParameterError(f"{context.kind.value} context already consumed by a backward pass")
    dy = upstream_grad if context.batched else upstream_grad[None]
    if dy.shape != context.output_shape:
        raise ShapeError(f"Upstream gradient {upstream_grad.shape} does not match forward output {context.output_shape}")

    context.consumed = True
    dx, grads = _BACKWARD[context.kind](context, dy)
    return _restore(dx, context.batched), grads


### Losses ###

def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def sigmoid(logits: Tensor) -> Tensor:
    return 0.5 * (1.0 + np.tanh(0.5 * logits))


def softmax_xent(logits: Tensor, label) -> tuple[Union[float, Tensor], Tensor]:
    """-log softmax(logits)[label] and its gradient softmax - onehot.

    One sample (``[n]`` logits, int label) gives a float loss; a batch
    (``[B, n]``, ``[B]`` labels) gives per-sample losses.
    """
    z = np.atleast_2d(logits)
    labels = np.atleast_1d(np.asarray(label)).astype(np.int64)
    B, n = z.shape
    if n < 2:
        raise ParameterError(f"softmax cross-entropy needs >= 2 classes, got {n}")
    if labels.shape != (B,):
        raise ShapeError(f"{labels.shape[0]} labels for {B} logit rows")
    if np.any(labels < 0) or np.any(labels >= n):
        raise ParameterError(f"Label out of range [0, {n}): {labels}")

    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(B)
    loss = -log_probs[rows, labels]
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0

    if logits.ndim == 1:
        return float(loss[0]), grad[0]
    return loss, grad


def sigmoid_bce(logits: Tensor, targets: Tensor) -> tuple[Union[float, Tensor], Tensor]:
    """Mean over classes of binary cross-entropy on sigmoid(logits)."""
    z = np.atleast_2d(logits)
    t = np.atleast_2d(np.asarray(targets, dtype=z.dtype))
    if z.shape != t.shape:
        raise ShapeError(f"Logits {z.shape} and targets {t.shape} differ")
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ParameterError("Multi-label targets must be 0 or 1")

    n = z.shape[1]
    per_class = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    loss = per_class.mean(axis=1)
    grad = (sigmoid(z) - t) / n

    if logits.ndim == 1:
        return float(loss[0]), grad[0]
    return loss, grad


### Registry handlers ###

def _conv_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if len(shape) != 3:
        raise ShapeError(f"conv layer {spec.name} needs [C, H, W] input, got {shape}")
    _, H, W = shape
    return (spec.kernels, conv_output_size(H, spec.width, spec.stride, spec.padding),
            conv_output_size(W, spec.width, spec.stride, spec.padding))


def _pool_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if len(shape) != 3:
        raise ShapeError(f"pooling layer {spec.name} needs [K, H, W] input, got {shape}")
    K, H, W = shape
    return K, pool_output_size(H, spec.pool_size, spec.stride), pool_output_size(W, spec.pool_size, spec.stride)


dcn_layers.register_layer(
    LayerKind.CONV,
    lambda spec, x, params, mode, rng: conv2d_forward(
        x, ConvParams(params["weight"], params["bias"], spec.stride, spec.padding)),
    _conv_shape,
    lambda spec, shape: {"weight": (spec.kernels, shape[0], spec.width, spec.width), "bias": (spec.kernels,)},
    "Square-kernel convolution (local response + tied weights), zero padding, no activation.",
)
dcn_layers.register_layer(
    LayerKind.MAXPOOL,
    lambda spec, x, params, mode, rng: maxpool_forward(x, spec.pool_size, spec.stride),
    _pool_shape,
    description="Max pooling with floor semantics; ties route to the first maximum in the window.",
)
dcn_layers.register_layer(
    LayerKind.RELU,
    lambda spec, x, params, mode, rng: relu_forward(x),
    lambda spec, shape: shape,
    description="Rectified linear unit f(x) = x * I(x > 0).",
)
dcn_layers.register_layer(
    LayerKind.FC,
    lambda spec, x, params, mode, rng: fc_forward(x, FcParams(params["weight"], params["bias"])),
    lambda spec, shape: (spec.units,),
    lambda spec, shape: {"weight": (spec.units, int(np.prod(shape))), "bias": (spec.units,)},
    "Affine map W x + b on the flattened input.",
)
dcn_layers.register_layer(
    LayerKind.DROPOUT,
    lambda spec, x, params, mode, rng: dropout(x, spec.rate, mode, rng),
    lambda spec, shape: shape,
    description="Inverted dropout; identity in eval mode.",
)
