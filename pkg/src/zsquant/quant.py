"""Quantization overlays on whole models.

Weights and activations are quantized per tensor. Overlays never mutate the
input model; they return a new graph sharing all untouched layers.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .quantizer import FULL, clip_range, fake_quantize, params_for_range


def _check_quantizable(model, layer_index):
    if not 0 <= layer_index < len(model.layers) or not model.layers[layer_index].quantizable:
        raise ValueError(f"layer {layer_index} is not a quantizable (Conv2D/Linear) layer")


def quantize_weights(w, k, clip_method="minmax", gamma=0.001):
    a, b = clip_range(w, clip_method, gamma)
    p = params_for_range(a, b, k)
    return fake_quantize(w, p), p


def apply_weight_quantization(model, layer_index, k, clip_method="minmax", gamma=0.001):
    """Copy of ``model`` with one layer's weights fake-quantized to ``k`` bits."""
    _check_quantizable(model, layer_index)
    if k == FULL:
        return model
    layer = model.layers[layer_index]
    wq, _ = quantize_weights(layer.weights, k, clip_method, gamma)
    return model.with_layer(layer_index, dataclasses.replace(layer, weights=wq))


def capture_activation_ranges(model, data, clip_method="minmax", gamma=0.001):
    """Clip range of the input activation of every quantizable layer."""
    trace = M.run(model, data)
    return {i: clip_range(x, clip_method, gamma) for i, x in trace.quantizable_inputs.items()}


@dataclass
class QuantizationRecord:
    entries: list = field(default_factory=list)

    def add(self, layer_index, kind, p):
        self.entries.append({"layer_index": int(layer_index), "kind": kind,
                             "a": p.clip_lo, "b": p.clip_hi, "k": int(p.bits)})

    def weight_entries(self):
        return [e for e in self.entries if e["kind"] == "weight"]

    def size_bits(self, model):
        return sum(model.layers[e["layer_index"]].param_count * e["k"]
                   for e in self.weight_entries())

    def to_json(self):
        return json.dumps(self.entries, indent=1)

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text))


def normalize_assignment(model, assignment):
    """Accept a ``{layer_index: k}`` mapping or a vector over quantizable layers."""
    idx = model.quantizable_indices
    if isinstance(assignment, dict):
        out = {int(i): int(k) for i, k in assignment.items()}
        unknown = set(out) - set(idx)
        if unknown:
            raise ValueError(f"assignment names non-quantizable layers {sorted(unknown)}")
        return {i: out.get(i, FULL) for i in idx}
    bits = list(assignment)
    if len(bits) != len(idx):
        raise ValueError(f"assignment has {len(bits)} entries, model has {len(idx)} "
                         "quantizable layers")
    return {i: int(k) for i, k in zip(idx, bits)}


def quantize_model(model, assignment, activation_bits=FULL, ranges=None,
                   clip_method="minmax", gamma=0.001):
    """Fake-quantize weights per ``assignment`` and activations at every
    quantizable layer's input. Returns ``(quantized_model, record)``."""
    bits = normalize_assignment(model, assignment)
    if activation_bits != FULL and ranges is None:
        raise ValueError("activation quantization needs captured activation ranges")
    layers = list(model.layers)
    record = QuantizationRecord()
    for i, k in bits.items():
        layer = layers[i]
        changes = {}
        if k == FULL:
            a, b = clip_range(layer.weights, clip_method, gamma)
            p = params_for_range(a, b, FULL)
        else:
            changes["weights"], p = quantize_weights(layer.weights, k, clip_method, gamma)
        record.add(i, "weight", p)
        if activation_bits != FULL:
            lo, hi = ranges[i]
            ap = params_for_range(lo, hi, activation_bits)
            changes["act_quant"] = (ap.clip_lo, ap.clip_hi, ap.bits)
            record.add(i, "activation", ap)
        if changes:
            layers[i] = dataclasses.replace(layer, **changes)
    return M.ModelGraph(model.name, model.input_shape, layers), record


def size_bits(param_counts, bits):
    return int(sum(int(p) * int(k) for p, k in zip(param_counts, bits)))


def agreement(model_a, model_b, data):
    """Top-1 agreement rate of two models over a batch or list of batches."""
    batches = data if isinstance(data, (list, tuple)) else [data]
    hits = n = 0
    for x in batches:
        ya, yb = M.output(model_a, x), M.output(model_b, x)
        hits += int(np.sum(ya.argmax(axis=-1) == yb.argmax(axis=-1)))
        n += ya.shape[0]
    return hits / n
