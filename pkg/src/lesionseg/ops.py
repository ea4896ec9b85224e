"""Neural-net primitives on NCHW numpy arrays: forward and backward passes.

Conventions used throughout:
  * activations are (N, C, H, W); weights are (Cout, Cin, kH, kW)
  * same-spatial-size convolutions use padding = dilation * (k - 1) / 2
  * every cross-batch reduction goes through per-sample partial sums that
    are combined in batch-index order, so results are deterministic and,
    at the default batch size of 2, exactly invariant to sample order
  * ops run in the dtype of their inputs (float32 in training, float64 in
    gradient verification)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateBatchError,
    GeometryError,
    InvalidLabelError,
    ShapeError,
)


@dataclass
class ConvParams:
    """Weights plus geometry for one convolution; `dilation` is the atrous rate."""

    weight: np.ndarray  # (Cout, Cin, kH, kW)
    bias: np.ndarray    # (Cout,)
    stride: int = 1
    dilation: int = 1
    padding: int = 0


@dataclass
class NormParams:
    """Per-channel affine batch normalization with running statistics."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    eps: float = 1e-5


@dataclass
class LossConfig:
    """Per-class loss weights, (background, foreground)."""

    class_weights: tuple[float, float] = (1.0, 100.0)


def same_padding(kernel: int, dilation: int) -> int:
    """Padding that keeps spatial size under stride 1; kernel must be odd."""
    if kernel % 2 != 1:
        raise GeometryError(f"same padding needs an odd kernel, got {kernel}")
    return dilation * (kernel - 1) // 2


def conv_out_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    """Output extent of a dilated convolution along one axis."""
    span = dilation * (kernel - 1) + 1
    if size + 2 * padding < span:
        raise GeometryError(
            f"input extent {size} with padding {padding} is smaller than the "
            f"dilated kernel span {span}")
    return (size + 2 * padding - span) // stride + 1


def _conv_windows(padded: np.ndarray, kh: int, kw: int, stride: int, dilation: int,
                  oh: int, ow: int) -> np.ndarray:
    """Strided view (N, C, oh, ow, kh, kw) over the padded input; no copy."""
    n, c = padded.shape[:2]
    sn, sc, sh, sw = padded.strides
    shape = (n, c, oh, ow, kh, kw)
    strides = (sn, sc, stride * sh, stride * sw, dilation * sh, dilation * sw)
    return np.lib.stride_tricks.as_strided(padded, shape=shape, strides=strides)


def _pad_hw(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Dilated 2-D convolution with zero padding and per-channel bias."""
    if x.ndim != 4:
        raise ShapeError(f"conv input must be NCHW, got {x.shape}")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = p.weight.shape
    if cin != cin_w:
        raise ShapeError(f"conv expects {cin_w} input channels, got {cin}")
    oh = conv_out_size(h, kh, p.stride, p.dilation, p.padding)
    ow = conv_out_size(w, kw, p.stride, p.dilation, p.padding)
    win = _conv_windows(_pad_hw(x, p.padding), kh, kw, p.stride, p.dilation, oh, ow)
    y = np.empty((n, cout, oh, ow), dtype=x.dtype)
    for i in range(n):  # per-sample contraction keeps results batch-position free
        yi = np.tensordot(win[i], p.weight, axes=([0, 3, 4], [1, 2, 3]))
        y[i] = yi.transpose(2, 0, 1)
    y += p.bias.reshape(1, cout, 1, 1)
    return y


def conv2d_backward(x: np.ndarray, p: ConvParams,
                    grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact gradients of conv2d_forward w.r.t. input, weight and bias."""
    n, cin, h, w = x.shape
    cout, _, kh, kw = p.weight.shape
    oh = conv_out_size(h, kh, p.stride, p.dilation, p.padding)
    ow = conv_out_size(w, kw, p.stride, p.dilation, p.padding)
    if grad_out.shape != (n, cout, oh, ow):
        raise ShapeError(
            f"grad_out shape {grad_out.shape} does not match conv output "
            f"{(n, cout, oh, ow)}")

    grad_bias = _batch_reduce(grad_out.sum(axis=(2, 3)))

    padded = _pad_hw(x, p.padding)
    win = _conv_windows(padded, kh, kw, p.stride, p.dilation, oh, ow)
    grad_weight = np.zeros_like(p.weight)
    for i in range(n):  # per-sample partials, combined in batch order
        grad_weight += np.tensordot(grad_out[i], win[i], axes=([1, 2], [1, 2]))

    grad_padded = np.zeros_like(padded)
    d, s = p.dilation, p.stride
    for ki in range(kh):
        for kj in range(kw):
            g = np.empty((n, cin, oh, ow), dtype=grad_out.dtype)
            for i in range(n):
                g[i] = np.tensordot(p.weight[:, :, ki, kj], grad_out[i], axes=(0, 0))
            grad_padded[:, :,
                        ki * d: ki * d + oh * s: s,
                        kj * d: kj * d + ow * s: s] += g
    pp = p.padding
    grad_input = grad_padded[:, :, pp: pp + h, pp: pp + w]
    if pp:
        grad_input = np.ascontiguousarray(grad_input)
    return grad_input, grad_weight, grad_bias


def _batch_reduce(per_sample: np.ndarray) -> np.ndarray:
    """Sum (N, ...) partials across axis 0 in ascending batch order."""
    return np.add.reduce(per_sample, axis=0)


def relu(x: np.ndarray) -> np.ndarray:
    """max(x, 0) elementwise."""
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass gradient where x > 0; subgradient 0 at exactly 0."""
    if x.shape != grad_out.shape:
        raise ShapeError(f"relu grad shape {grad_out.shape} != input {x.shape}")
    return np.where(x > 0, grad_out, 0)


def maxpool2d(x: np.ndarray, k: int = 2, s: int = 2) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling; ties go to the first element in row-major window order.

    Returns (pooled, argmax) with argmax holding flat in-window indices.
    """
    n, c, h, w = x.shape
    if h < k or w < k:
        raise GeometryError(f"pool window {k} exceeds input {h}x{w}")
    oh = (h - k) // s + 1
    ow = (w - k) // s + 1
    win = _conv_windows(x, k, k, s, 1, oh, ow).reshape(n, c, oh, ow, k * k)
    idx = np.argmax(win, axis=-1)  # first occurrence wins ties
    pooled = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return pooled, idx


def maxpool2d_backward(x: np.ndarray, idx: np.ndarray, grad_out: np.ndarray,
                       k: int = 2, s: int = 2) -> np.ndarray:
    """Scatter each window's gradient to the position recorded in `idx`."""
    n, c, h, w = x.shape
    oh, ow = idx.shape[2:]
    if grad_out.shape != idx.shape:
        raise ShapeError(f"pool grad shape {grad_out.shape} != {idx.shape}")
    grad_in = np.zeros_like(x)
    for t in range(k * k):
        ki, kj = divmod(t, k)
        target = grad_in[:, :, ki: ki + oh * s: s, kj: kj + ow * s: s]
        target += np.where(idx == t, grad_out, 0)
    return grad_in


def batchnorm_forward(x: np.ndarray, p: NormParams,
                      train: bool) -> tuple[np.ndarray, tuple]:
    """Normalize per channel; train mode also updates running stats in place."""
    n, c, h, w = x.shape
    if train:
        m = n * h * w
        if m < 2:
            raise DegenerateBatchError(
                f"batch statistics need >= 2 elements per channel, got {m}")
        mean = _batch_reduce(x.sum(axis=(2, 3))) / m
        centered = x - mean.reshape(1, c, 1, 1)
        var = _batch_reduce((centered * centered).sum(axis=(2, 3))) / m
        mom = p.momentum
        p.running_mean[...] = mom * p.running_mean + (1.0 - mom) * mean
        p.running_var[...] = mom * p.running_var + (1.0 - mom) * var
    else:
        mean = p.running_mean.astype(x.dtype)
        var = p.running_var.astype(x.dtype)
        centered = x - mean.reshape(1, c, 1, 1)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = centered * inv_std.reshape(1, c, 1, 1)
    y = p.gamma.reshape(1, c, 1, 1) * xhat + p.beta.reshape(1, c, 1, 1)
    cache = (xhat, inv_std.astype(x.dtype), p.gamma, train)
    return y, cache


def batchnorm_backward(cache: tuple,
                       grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients w.r.t. input, gamma and beta for either mode."""
    xhat, inv_std, gamma, train = cache
    n, c, h, w = xhat.shape
    dbeta = _batch_reduce(grad_out.sum(axis=(2, 3)))
    dgamma = _batch_reduce((grad_out * xhat).sum(axis=(2, 3)))
    gscaled = gamma.reshape(1, c, 1, 1) * grad_out
    if train:
        m = n * h * w
        mean_g = _batch_reduce(gscaled.sum(axis=(2, 3))) / m
        mean_gx = _batch_reduce((gscaled * xhat).sum(axis=(2, 3))) / m
        grad_in = inv_std.reshape(1, c, 1, 1) * (
            gscaled - mean_g.reshape(1, c, 1, 1) - xhat * mean_gx.reshape(1, c, 1, 1))
    else:
        grad_in = inv_std.reshape(1, c, 1, 1) * gscaled
    return grad_in, dgamma, dbeta


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over H and W per channel, kept as (N, C, 1, 1)."""
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape: tuple, grad_out: np.ndarray) -> np.ndarray:
    """Spread each channel's gradient uniformly over its H*W cells."""
    n, c, h, w = x_shape
    if grad_out.shape != (n, c, 1, 1):
        raise ShapeError(f"gap grad shape {grad_out.shape} != {(n, c, 1, 1)}")
    return np.broadcast_to(grad_out / (h * w), x_shape).copy()


def _lerp_matrix(out_size: int, in_size: int, dtype=np.float64) -> np.ndarray:
    """Corner-aligned interpolation weights, shape (out_size, in_size).

    Row o samples source coordinate o * (in-1)/(out-1); the first and last
    rows are pinned to the exact corners. in_size == 1 broadcasts.
    """
    if out_size < 1 or in_size < 1:
        raise GeometryError(f"interpolation sizes must be >= 1, got {out_size}, {in_size}")
    m = np.zeros((out_size, in_size), dtype=dtype)
    if in_size == 1 or out_size == 1:
        m[:, 0] = 1.0
        return m
    scale = (in_size - 1) / (out_size - 1)
    y = np.arange(out_size, dtype=np.float64) * scale
    i0 = np.clip(np.floor(y).astype(np.int64), 0, in_size - 2)
    t = y - i0
    rows = np.arange(out_size)
    m[rows, i0] = 1.0 - t
    m[rows, i0 + 1] += t
    m[0, :] = 0.0
    m[0, 0] = 1.0
    m[-1, :] = 0.0
    m[-1, in_size - 1] = 1.0
    return m


def bilinear_upsample(x: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Corner-aligned bilinear resampling of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"bilinear input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    mh = _lerp_matrix(out_h, h, dtype=x.dtype)
    mw = _lerp_matrix(out_w, w, dtype=x.dtype)
    y = np.empty((n, c, out_h, out_w), dtype=x.dtype)
    for i in range(n):
        y[i] = np.einsum("ab,cbd,ed->cae", mh, x[i], mw, optimize=True)
    return y


def bilinear_upsample_backward(grad_out: np.ndarray, in_h: int, in_w: int) -> np.ndarray:
    """Transpose of bilinear_upsample: accumulate into the source cells."""
    if grad_out.ndim != 4:
        raise ShapeError(f"bilinear grad must be NCHW, got {grad_out.shape}")
    n, c, oh, ow = grad_out.shape
    mh = _lerp_matrix(oh, in_h, dtype=grad_out.dtype)
    mw = _lerp_matrix(ow, in_w, dtype=grad_out.dtype)
    gin = np.empty((n, c, in_h, in_w), dtype=grad_out.dtype)
    for i in range(n):
        gin[i] = np.einsum("ab,cae,ed->cbd", mh, grad_out[i], mw, optimize=True)
    return gin


def softmax_channels(logits: np.ndarray) -> np.ndarray:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    if logits.ndim != 4 or logits.shape[1] < 2:
        raise ShapeError(f"softmax needs (N, K>=2, H, W), got {logits.shape}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def weighted_ce_loss(logits: np.ndarray, labels: np.ndarray,
                     cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Class-weighted cross entropy, normalized by the total pixel weight.

    loss = sum_i w_i * (-log p_{y_i}) / sum_i w_i with w taken per pixel
    from cfg.class_weights by label. Returns (loss, d loss / d logits).
    """
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ShapeError(f"loss expects (N, 2, H, W) logits, got {logits.shape}")
    n, _, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    lab = labels.astype(np.int64, copy=False)
    if not np.isin(lab, (0, 1)).all():
        raise InvalidLabelError("labels must be 0 or 1")
    w_bg, w_fg = cfg.class_weights
    if w_bg <= 0 or w_fg <= 0:
        raise InvalidLabelError("class weights must be positive")

    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    weights = np.where(lab == 1, logits.dtype.type(w_fg), logits.dtype.type(w_bg))
    logp_y = np.take_along_axis(logp, lab[:, None], axis=1)[:, 0]

    num = _batch_reduce((-weights * logp_y).sum(axis=(1, 2)))
    den = _batch_reduce(weights.sum(axis=(1, 2)))
    loss = float(num / den)

    onehot = np.zeros_like(logits)
    np.put_along_axis(onehot, lab[:, None], 1.0, axis=1)
    grad = weights[:, None] * (np.exp(logp) - onehot) / den
    return loss, grad


def lr_at_step(step: int, base_lr: float, max_steps: int, power: float = 0.9) -> float:
    """Polynomial decay base_lr * (1 - step/max_steps)^power, clamped past the end."""
    if power <= 0:
        raise ValueError("power must be > 0")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    if step < 0:
        raise ValueError("step must be >= 0")
    if step >= max_steps:
        return 0.0
    return base_lr * (1.0 - step / max_steps) ** power
