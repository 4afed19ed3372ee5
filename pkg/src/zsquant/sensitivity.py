"""Per-layer quantization sensitivity.

The sensitivity of layer ``i`` at ``k`` bits is the batch-mean KL divergence
between the full-precision model's output distribution and the output of
the same model with only layer ``i``'s weights fake-quantized to ``k`` bits.
"""
from __future__ import annotations

import csv
import hashlib
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import model as M
from .errors import ShapeError
from .quant import apply_weight_quantization
from .quantizer import FULL

PROB_FLOOR = 1e-12


def _softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def kl_divergence(p_out, q_out, probabilities=False):
    """Batch-mean ``KL(P || Q)`` between row-wise output distributions.

    ``p_out`` is the reference (full-precision) output. Raw outputs are
    softmaxed; pass ``probabilities=True`` if they already are distributions.
    """
    p_out, q_out = np.asarray(p_out), np.asarray(q_out)
    if p_out.shape != q_out.shape:
        raise ShapeError("KL operands", expected=p_out.shape, actual=q_out.shape)
    if p_out.ndim == 1:
        p_out, q_out = p_out[None], q_out[None]
    if probabilities:
        p, q = p_out.astype(np.float64), q_out.astype(np.float64)
    else:
        p, q = _softmax(p_out), _softmax(q_out)
    p = np.maximum(p, PROB_FLOOR)
    q = np.maximum(q, PROB_FLOOR)
    kl = np.sum(p * (np.log(p) - np.log(q)), axis=-1)
    return float(max(kl.mean(), 0.0))


def data_fingerprint(data):
    x = np.ascontiguousarray(data, dtype=np.float32)
    h = hashlib.sha256(repr(x.shape).encode())
    h.update(x.tobytes())
    return h.hexdigest()[:16]


class SensitivityEvaluator:
    """Holds the cached full-precision reference output for one data batch.

    ``forward_passes`` counts every model evaluation it performs.
    """

    def __init__(self, model, data, clip_method="minmax", gamma=0.001, use_cache=True):
        self.model = model
        self.data = np.asarray(data, dtype=np.float32)
        self.clip_method = clip_method
        self.gamma = gamma
        self.use_cache = use_cache
        self.fingerprint = data_fingerprint(self.data)
        self.forward_passes = 0
        self._reference = None
        self._lock = threading.Lock()

    def _run(self, m):
        with self._lock:
            self.forward_passes += 1
        return M.output(m, self.data)

    @property
    def reference(self):
        if self._reference is None or not self.use_cache:
            ref = self._run(self.model)
            if not self.use_cache:
                return ref
            self._reference = ref
        return self._reference

    def divergence(self, quantized_model):
        return kl_divergence(self.reference, self._run(quantized_model),
                             probabilities=self.model.ends_with_softmax)

    def layer(self, layer_index, k):
        if not self.model.layers[layer_index].quantizable:
            raise ValueError(f"layer {layer_index} is not quantizable")
        if k == FULL:
            return 0.0
        q = apply_weight_quantization(self.model, layer_index, k, self.clip_method, self.gamma)
        return self.divergence(q)

    def joint(self, bits_by_layer):
        """Sensitivity with several layers quantized at once."""
        m = self.model
        for i, k in bits_by_layer.items():
            m = apply_weight_quantization(m, i, k, self.clip_method, self.gamma)
        if m is self.model:
            return 0.0
        return self.divergence(m)


def layer_sensitivity(model, data, layer_index, k, clip_method="minmax", gamma=0.001,
                      evaluator=None):
    ev = evaluator or SensitivityEvaluator(model, data, clip_method, gamma)
    return ev.layer(layer_index, k)


def joint_sensitivity(model, data, assignment, clip_method="minmax", gamma=0.001,
                      evaluator=None):
    """True sensitivity with every assigned layer quantized at once.

    ``assignment`` is a ``{layer_index: k}`` mapping or anything with an
    ``as_dict()`` method.
    """
    bits = assignment.as_dict() if hasattr(assignment, "as_dict") else dict(assignment)
    ev = evaluator or SensitivityEvaluator(model, data, clip_method, gamma)
    return ev.joint(bits)


@dataclass
class SensitivityTable:
    layer_ids: list
    bit_options: list
    omega: np.ndarray
    param_counts: list
    data_fingerprint: str = ""

    def value(self, layer_index, k):
        return float(self.omega[self.layer_ids.index(layer_index), self.bit_options.index(k)])

    def rows(self):
        for r, layer in enumerate(self.layer_ids):
            for c, k in enumerate(self.bit_options):
                yield layer, self.param_counts[r], k, float(self.omega[r, c])

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["layer", "param_count", "k", "omega"])
            for layer, pc, k, om in self.rows():
                w.writerow([layer, pc, k, repr(om)])

    @classmethod
    def from_csv(cls, path):
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows or set(rows[0]) != {"layer", "param_count", "k", "omega"}:
            raise ValueError(f"{path}: expected header layer,param_count,k,omega")
        layers = sorted({int(r["layer"]) for r in rows})
        bits = sorted({int(r["k"]) for r in rows})
        omega = np.full((len(layers), len(bits)), np.nan)
        counts = {}
        for r in rows:
            li, k = int(r["layer"]), int(r["k"])
            omega[layers.index(li), bits.index(k)] = float(r["omega"])
            counts[li] = int(r["param_count"])
        if np.isnan(omega).any():
            raise ValueError(f"{path}: table is missing (layer, k) cells")
        return cls(layers, bits, omega, [counts[i] for i in layers])


def build_sensitivity_table(model, data, bit_options, clip_method="minmax", gamma=0.001,
                            threads=1, evaluator=None):
    """One quantized forward pass per (layer, k) cell plus one reference pass.

    FULL cells are zero by definition and cost no pass.
    """
    ev = evaluator or SensitivityEvaluator(model, data, clip_method, gamma)
    layers = model.quantizable_indices
    bits = sorted(int(k) for k in bit_options)
    _ = ev.reference  # fill the cache before any worker runs
    cells = [(r, c) for r in range(len(layers)) for c in range(len(bits))]
    omega = np.zeros((len(layers), len(bits)))

    def cell(rc):
        r, c = rc
        return ev.layer(layers[r], bits[c])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(cell, cells))
    else:
        results = [cell(rc) for rc in cells]
    for (r, c), v in zip(cells, results):
        omega[r, c] = v
    return SensitivityTable(layers, bits, omega, model.param_counts(), ev.fingerprint)
