"""Model graphs: validation, traced execution, BN calibration and backprop.

A graph is an ordered list of layers. Each layer consumes the output of its
predecessor; a SkipAdd layer additionally consumes the output of an earlier
layer (or the model input, index ``-1``).
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor
from .errors import ShapeChainError, ShapeError
from .layers import BatchNorm, SkipAdd, Softmax


@dataclass(eq=False)
class ModelGraph:
    name: str
    input_shape: tuple
    layers: list

    def __post_init__(self):
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.layers = list(self.layers)

    @property
    def bn_indices(self):
        return [i for i, l in enumerate(self.layers) if isinstance(l, BatchNorm)]

    @property
    def quantizable_indices(self):
        return [i for i, l in enumerate(self.layers) if l.quantizable]

    @property
    def num_bn(self):
        return len(self.bn_indices)

    def param_counts(self):
        return [self.layers[i].param_count for i in self.quantizable_indices]

    @property
    def ends_with_softmax(self):
        return bool(self.layers) and isinstance(self.layers[-1], Softmax)

    def shapes(self):
        """Per-sample output shape of every layer; raises on any mismatch."""
        out = []
        prev = self.input_shape
        for i, layer in enumerate(self.layers):
            skip = None
            if isinstance(layer, SkipAdd):
                src = layer.source_layer_index
                if not -1 <= src < i:
                    raise ShapeChainError(
                        f"SkipAdd source {src} does not precede the layer", i)
                skip = self.input_shape if src == -1 else out[src]
            try:
                prev = tuple(layer.output_shape(prev, i, skip))
            except ShapeChainError:
                raise
            except ShapeError as exc:
                before = "model input" if i == 0 else \
                    f"layer {i - 1} ({self.layers[i - 1].kind})"
                raise ShapeChainError(
                    f"layer {i} ({layer.kind}) does not accept the output of {before}: {exc}",
                    expected=exc.expected, actual=exc.actual) from exc
            out.append(prev)
        return out

    def validate(self):
        self.shapes()
        return self

    def copy(self):
        return ModelGraph(self.name, self.input_shape, [copy.deepcopy(l) for l in self.layers])

    def with_layer(self, index, layer):
        """New graph sharing every layer except ``index``."""
        layers = list(self.layers)
        layers[index] = layer
        return ModelGraph(self.name, self.input_shape, layers)


@dataclass
class RunTrace:
    output: np.ndarray
    pre_bn_activations: dict = field(default_factory=dict)
    quantizable_inputs: dict = field(default_factory=dict)


def _check_batch(model, x):
    x = np.asarray(x)
    if x.ndim != len(model.input_shape) + 1 or tuple(x.shape[1:]) != model.input_shape \
            or x.shape[0] < 1:
        raise ShapeError("model input", expected=("N",) + model.input_shape, actual=x.shape)
    if not np.all(np.isfinite(x)):
        raise ValueError("model input contains non-finite values")
    return x


def _layer_inputs(model, values, x, i):
    prev = x if i == 0 else values[i - 1]
    layer = model.layers[i]
    if isinstance(layer, SkipAdd):
        src = layer.source_layer_index
        if not -1 <= src < i:
            raise ShapeChainError(f"SkipAdd source {src} does not precede the layer", i)
        return (prev, x if src == -1 else values[src])
    return prev


def forward_all(model, x, stop=None):
    """Outputs of every layer (up to, excluding, ``stop``)."""
    x = _check_batch(model, x)
    values = []
    n = len(model.layers) if stop is None else stop
    for i in range(n):
        values.append(tensor.forward(model.layers[i], _layer_inputs(model, values, x, i), i))
    return values


def run(model, batch):
    """Forward pass recording pre-BN activations and quantizable-layer inputs."""
    x = _check_batch(model, batch)
    values = forward_all(model, x)
    trace = RunTrace(values[-1] if values else x)
    for i, layer in enumerate(model.layers):
        if isinstance(layer, BatchNorm):
            trace.pre_bn_activations[i] = x if i == 0 else values[i - 1]
        elif layer.quantizable:
            trace.quantizable_inputs[i] = x if i == 0 else values[i - 1]
    return trace


def output(model, batch):
    values = forward_all(model, batch)
    return values[-1] if values else np.asarray(batch)


def backward(model, x, values, output_grads):
    """Reverse-mode gradient w.r.t. the model input.

    ``output_grads`` maps a layer index (``-1`` for the input itself) to a
    gradient on that layer's output. Layers downstream of every injected
    gradient are skipped.
    """
    grads = {k: np.array(v, copy=True) for k, v in output_grads.items()}
    for i in range(len(model.layers) - 1, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        layer = model.layers[i]
        ins = _layer_inputs(model, values, x, i)
        gin = tensor.input_gradient(layer, ins, g, i, output=values[i])
        targets = [i - 1]
        if isinstance(layer, SkipAdd):
            targets.append(layer.source_layer_index)
        else:
            gin = (gin,)
        for t, gt in zip(targets, gin):
            grads[t] = grads[t] + gt if t in grads else gt
    g = grads.get(-1)
    return np.zeros_like(x) if g is None else g


def calibrate_bn_stats(model, dataset):
    """Copy of ``model`` whose BN running stats equal exact dataset statistics.

    BN layers are calibrated in order, so each layer sees activations
    normalized by the already-calibrated layers before it.
    """
    batches = [np.asarray(b, dtype=np.float32) for b in dataset]
    if not batches:
        raise ValueError("calibration dataset is empty")
    for b in batches:
        _check_batch(model, b)
    out = model.copy()
    for j in out.bn_indices:
        zs = []
        for b in batches:
            vals = forward_all(out, b, stop=j)
            zs.append(b if j == 0 else vals[j - 1])
        stats = tensor.channel_stats(np.concatenate(zs, axis=0))
        bn = out.layers[j]
        bn.mu = stats.mean.astype(np.float32)
        bn.sigma2 = stats.variance.astype(np.float32)
    return out
