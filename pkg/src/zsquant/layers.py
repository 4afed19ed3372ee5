"""Layer specifications.

Each layer is a small dataclass holding its parameters as float32 arrays.
Shapes are per-sample (no batch axis): ``(C, H, W)`` for feature maps and
``(F,)`` for flat vectors.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import ClassVar, Optional

import numpy as np

from .errors import ShapeError


def _f32(a):
    return None if a is None else np.ascontiguousarray(a, dtype=np.float32)


@dataclass(eq=False)
class Layer:
    kind: ClassVar[str] = ""
    quantizable: ClassVar[bool] = False

    def output_shape(self, in_shape, index=None, skip_shape=None):
        return tuple(in_shape)

    def tensors(self):
        """Named parameter arrays, in a stable order."""
        return {}

    def params(self):
        """JSON-serializable non-tensor parameters."""
        return {}


@dataclass(eq=False)
class Conv2D(Layer):
    weights: np.ndarray = None  # (out_ch, in_ch, kh, kw)
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0
    # (clip_lo, clip_hi, bits) applied to the layer input; None = full precision
    act_quant: Optional[tuple] = None

    kind: ClassVar[str] = "Conv2D"
    quantizable: ClassVar[bool] = True

    def __post_init__(self):
        self.weights = _f32(self.weights)
        self.bias = _f32(self.bias)
        if self.weights.ndim != 4:
            raise ShapeError("Conv2D weights must be 4-D", expected="(O,I,kh,kw)",
                             actual=self.weights.shape)
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("Conv2D bias length", expected=(self.weights.shape[0],),
                             actual=self.bias.shape)
        if self.stride < 1 or self.padding < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")

    @property
    def param_count(self):
        return int(self.weights.size)

    def output_shape(self, in_shape, index=None, skip_shape=None):
        o, i, kh, kw = self.weights.shape
        if len(in_shape) != 3 or in_shape[0] != i:
            raise ShapeError("Conv2D input", index, expected=f"({i},H,W)", actual=tuple(in_shape))
        h = (in_shape[1] + 2 * self.padding - kh) // self.stride + 1
        w = (in_shape[2] + 2 * self.padding - kw) // self.stride + 1
        if h < 1 or w < 1:
            raise ShapeError("Conv2D kernel larger than padded input", index,
                             expected=f"spatial >= ({kh},{kw})", actual=tuple(in_shape))
        return (o, h, w)

    def tensors(self):
        out = {"weights": self.weights}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def params(self):
        p = {"weights_shape": list(self.weights.shape), "stride": self.stride,
             "padding": self.padding, "has_bias": self.bias is not None}
        if self.act_quant is not None:
            p["act_quant"] = list(self.act_quant)
        return p


@dataclass(eq=False)
class BatchNorm(Layer):
    mu: np.ndarray = None
    sigma2: np.ndarray = None
    gamma: np.ndarray = None
    beta: np.ndarray = None
    eps: float = 1e-5

    kind: ClassVar[str] = "BatchNormInference"

    def __post_init__(self):
        self.mu, self.sigma2 = _f32(self.mu), _f32(self.sigma2)
        self.gamma, self.beta = _f32(self.gamma), _f32(self.beta)
        n = self.mu.shape
        for name in ("sigma2", "gamma", "beta"):
            if getattr(self, name).shape != n:
                raise ShapeError(f"BatchNorm {name} length", expected=n,
                                 actual=getattr(self, name).shape)
        if self.mu.ndim != 1:
            raise ShapeError("BatchNorm vectors must be 1-D", actual=self.mu.shape)
        if np.any(self.sigma2 < 0):
            raise ValueError("BatchNorm sigma2 must be non-negative")
        if not self.eps > 0:
            raise ValueError("BatchNorm eps must be positive")

    @property
    def channels(self):
        return int(self.mu.shape[0])

    def output_shape(self, in_shape, index=None, skip_shape=None):
        if len(in_shape) not in (1, 3) or in_shape[0] != self.channels:
            raise ShapeError("BatchNorm input channels", index,
                             expected=self.channels, actual=tuple(in_shape))
        return tuple(in_shape)

    def tensors(self):
        return {"mu": self.mu, "sigma2": self.sigma2, "gamma": self.gamma, "beta": self.beta}

    def params(self):
        return {"channels": self.channels, "eps": self.eps}


@dataclass(eq=False)
class ReLU(Layer):
    kind: ClassVar[str] = "ReLU"


@dataclass(eq=False)
class Linear(Layer):
    weights: np.ndarray = None  # (out, in)
    bias: Optional[np.ndarray] = None
    act_quant: Optional[tuple] = None

    kind: ClassVar[str] = "Linear"
    quantizable: ClassVar[bool] = True

    def __post_init__(self):
        self.weights = _f32(self.weights)
        self.bias = _f32(self.bias)
        if self.weights.ndim != 2:
            raise ShapeError("Linear weights must be 2-D", expected="(out,in)",
                             actual=self.weights.shape)
        if self.bias is not None and self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("Linear bias length", expected=(self.weights.shape[0],),
                             actual=self.bias.shape)

    @property
    def param_count(self):
        return int(self.weights.size)

    def output_shape(self, in_shape, index=None, skip_shape=None):
        o, i = self.weights.shape
        if tuple(in_shape) != (i,):
            raise ShapeError("Linear input", index, expected=(i,), actual=tuple(in_shape))
        return (o,)

    def tensors(self):
        out = {"weights": self.weights}
        if self.bias is not None:
            out["bias"] = self.bias
        return out

    def params(self):
        p = {"weights_shape": list(self.weights.shape), "has_bias": self.bias is not None}
        if self.act_quant is not None:
            p["act_quant"] = list(self.act_quant)
        return p


@dataclass(eq=False)
class GlobalAvgPool(Layer):
    kind: ClassVar[str] = "GlobalAvgPool"

    def output_shape(self, in_shape, index=None, skip_shape=None):
        if len(in_shape) != 3:
            raise ShapeError("GlobalAvgPool expects a (C,H,W) input", index,
                             expected="(C,H,W)", actual=tuple(in_shape))
        return (in_shape[0],)


@dataclass(eq=False)
class SkipAdd(Layer):
    """Adds the output of an earlier layer (``-1`` means the model input)."""

    source_layer_index: int = -1

    kind: ClassVar[str] = "SkipAdd"

    def output_shape(self, in_shape, index=None, skip_shape=None):
        if skip_shape is not None and tuple(skip_shape) != tuple(in_shape):
            raise ShapeError(f"SkipAdd operand from layer {self.source_layer_index}", index,
                             expected=tuple(in_shape), actual=tuple(skip_shape))
        return tuple(in_shape)

    def params(self):
        return {"source_layer_index": self.source_layer_index}


@dataclass(eq=False)
class Softmax(Layer):
    kind: ClassVar[str] = "Softmax"

    def output_shape(self, in_shape, index=None, skip_shape=None):
        if len(in_shape) != 1:
            raise ShapeError("Softmax expects a flat input", index, expected="(F,)",
                             actual=tuple(in_shape))
        return tuple(in_shape)


LAYER_KINDS = {cls.kind: cls for cls in
               (Conv2D, BatchNorm, ReLU, Linear, GlobalAvgPool, SkipAdd, Softmax)}
