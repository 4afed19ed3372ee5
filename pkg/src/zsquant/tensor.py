"""Dense forward passes and input gradients for every layer kind.

Tensors are plain numpy arrays. Activations use (batch, channel, height,
width) order. Every function computes in the dtype of its input, so callers
can run float64 copies for finite-difference checks while the pipeline
itself stays in float32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .layers import BatchNorm, Conv2D, GlobalAvgPool, Linear, ReLU, SkipAdd, Softmax
from .quantizer import fake_quantize_range

EPS_STD = 1e-8


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    variance: np.ndarray

    def std(self, eps_std=EPS_STD):
        return np.sqrt(self.variance + eps_std)


def _check_input(layer, x, index):
    layer.output_shape(x.shape[1:], index)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"layer {index}: non-finite input")


def _split_inputs(layer, inputs, index):
    if isinstance(inputs, np.ndarray):
        inputs = (inputs,)
    inputs = tuple(inputs)
    want = 2 if isinstance(layer, SkipAdd) else 1
    if len(inputs) != want:
        raise ShapeError(f"{layer.kind} takes {want} input(s)", index,
                         expected=want, actual=len(inputs))
    if want == 2 and inputs[0].shape != inputs[1].shape:
        raise ShapeError("SkipAdd operands differ", index,
                         expected=inputs[0].shape, actual=inputs[1].shape)
    return inputs


def _conv_forward(layer, x):
    w = layer.weights.astype(x.dtype, copy=False)
    o, c, kh, kw = w.shape
    p, s = layer.padding, layer.stride
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho = (x.shape[2] - kh) // s + 1
    wo = (x.shape[3] - kw) // s + 1
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    if layer.bias is not None:
        out += layer.bias.astype(x.dtype, copy=False)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_input_grad(layer, x, g):
    w = layer.weights.astype(g.dtype, copy=False)
    kh, kw = w.shape[2:]
    p, s = layer.padding, layer.stride
    n, _, ho, wo = g.shape
    gpad = np.zeros((n, x.shape[1], x.shape[2] + 2 * p, x.shape[3] + 2 * p), dtype=g.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(g, w[:, :, i, j], axes=([1], [0]))  # (N, Ho, Wo, C)
            gpad[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += \
                contrib.transpose(0, 3, 1, 2)
    if p:
        gpad = gpad[:, :, p:-p, p:-p]
    return np.ascontiguousarray(gpad)


def _bn_scale(layer, x):
    shape = (1, -1) + (1,) * (x.ndim - 2)
    dt = x.dtype
    inv = 1.0 / np.sqrt(layer.sigma2.astype(np.float64) + layer.eps)
    scale = (layer.gamma.astype(np.float64) * inv).astype(dt).reshape(shape)
    return scale, shape


def _input_fake_quant(layer, x):
    aq = getattr(layer, "act_quant", None)
    if aq is None:
        return x
    return fake_quantize_range(x, aq[0], aq[1], int(aq[2]))


def forward(layer, inputs, index=None):
    """Run one layer on a batch. ``inputs`` is an array, or a pair for SkipAdd."""
    inputs = _split_inputs(layer, inputs, index)
    x = inputs[0]
    _check_input(layer, x, index)
    if isinstance(layer, Conv2D):
        return _conv_forward(layer, _input_fake_quant(layer, x))
    if isinstance(layer, BatchNorm):
        scale, shape = _bn_scale(layer, x)
        mu = layer.mu.astype(x.dtype).reshape(shape)
        return (x - mu) * scale + layer.beta.astype(x.dtype).reshape(shape)
    if isinstance(layer, ReLU):
        return np.maximum(x, 0)
    if isinstance(layer, Linear):
        x = _input_fake_quant(layer, x)
        out = x @ layer.weights.astype(x.dtype, copy=False).T
        if layer.bias is not None:
            out += layer.bias.astype(x.dtype, copy=False)
        return out
    if isinstance(layer, GlobalAvgPool):
        return x.mean(axis=(2, 3))
    if isinstance(layer, SkipAdd):
        return x + inputs[1]
    if isinstance(layer, Softmax):
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)
    raise TypeError(f"unsupported layer kind {type(layer).__name__}")


def input_gradient(layer, inputs, upstream_grad, index=None, output=None):
    """Gradient w.r.t. each layer input given the gradient w.r.t. its output.

    Returns a single array, or a pair for SkipAdd. Input fake-quantization is
    treated as identity (straight-through). ``output`` may be passed to
    reuse a forward result (only Softmax needs it).
    """
    inputs = _split_inputs(layer, inputs, index)
    x = inputs[0]
    g = upstream_grad
    expected = (x.shape[0],) + layer.output_shape(x.shape[1:], index)
    if g.shape != expected:
        raise ShapeError("upstream gradient", index, expected=expected, actual=g.shape)
    if isinstance(layer, Conv2D):
        return _conv_input_grad(layer, x, g)
    if isinstance(layer, BatchNorm):
        scale, _ = _bn_scale(layer, x)
        return g * scale
    if isinstance(layer, ReLU):
        return g * (x > 0)
    if isinstance(layer, Linear):
        return g @ layer.weights.astype(g.dtype, copy=False)
    if isinstance(layer, GlobalAvgPool):
        hw = x.shape[2] * x.shape[3]
        return np.broadcast_to((g / hw)[:, :, None, None], x.shape).copy()
    if isinstance(layer, SkipAdd):
        return g.copy(), g.copy()
    if isinstance(layer, Softmax):
        s = forward(layer, x, index) if output is None else output
        return s * (g - (g * s).sum(axis=-1, keepdims=True))
    raise TypeError(f"unsupported layer kind {type(layer).__name__}")


def _reduce_axes(x):
    if x.ndim == 4:
        return (0, 2, 3)
    if x.ndim == 2:
        return (0,)
    raise ShapeError("channel statistics need a (N,C,H,W) or (N,C) tensor", actual=x.shape)


def channel_stats(x):
    """Per-channel mean and population variance over batch and spatial axes.

    Values are summed in sorted order, so the result does not depend on the
    order of batch rows.
    """
    _reduce_axes(x)
    if x.size == 0:
        raise ShapeError("empty tensor", actual=x.shape)
    per_channel = np.moveaxis(x, 1, 0).reshape(x.shape[1], -1).astype(np.float64)
    per_channel = np.sort(per_channel, axis=1)
    mean = per_channel.sum(axis=1) / per_channel.shape[1]
    dev = np.sort((per_channel - mean[:, None]) ** 2, axis=1)
    var = dev.sum(axis=1) / per_channel.shape[1]
    return ChannelStats(mean, var)


def moments(x):
    """Fast unsorted per-channel (mean, variance) in float64."""
    axes = _reduce_axes(x)
    mean = x.mean(axis=axes, dtype=np.float64)
    shape = (1, -1) + (1,) * (x.ndim - 2)
    var = ((x - mean.reshape(shape).astype(x.dtype)) ** 2).mean(axis=axes, dtype=np.float64)
    return mean, var


def stats_gradient(x, upstream_mean_grad, upstream_std_grad, eps_std=EPS_STD):
    """Backpropagate gradients on per-channel mean and std into ``x``.

    The std is ``sqrt(var + eps_std)``, so zero-variance channels stay finite.
    """
    _reduce_axes(x)
    n = x.size // x.shape[1]
    shape = (1, -1) + (1,) * (x.ndim - 2)
    mean, var = moments(x)
    std = np.sqrt(var + eps_std)
    gm = np.asarray(upstream_mean_grad, dtype=np.float64)
    gs = np.asarray(upstream_std_grad, dtype=np.float64)
    if gm.shape != mean.shape or gs.shape != mean.shape:
        raise ShapeError("stat gradient length", expected=mean.shape,
                         actual=(gm.shape, gs.shape))
    a = (gm / n).reshape(shape).astype(x.dtype)
    b = (gs / (n * std)).reshape(shape).astype(x.dtype)
    return a + b * (x - mean.reshape(shape).astype(x.dtype))
