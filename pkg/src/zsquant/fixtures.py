"""Deterministic toy networks standing in for pretrained models.

Weights are random; BN running statistics come from calibrating on a seeded
mixture of spatially-correlated Gaussians, so every layer sees non-trivial
statistics that plain white noise does not reproduce.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from .layers import BatchNorm, Conv2D, GlobalAvgPool, Linear, ReLU, SkipAdd
from .model import ModelGraph, calibrate_bn_stats

FIXTURES = ("tiny3", "skipnet", "nobn")
INPUT_SHAPE = (3, 16, 16)
NUM_CLASSES = 10
_NOISE_SIGMA = 2.0  # spatial correlation length of the per-sample noise
_SPLITS = {"calib": 1, "heldout": 2, "eval": 3}


class _Builder:
    def __init__(self, rng, in_ch):
        self.rng = rng
        self.ch = in_ch
        self.layers = []

    def conv(self, out_ch, k=3, stride=1, bias=False):
        fan_in = self.ch * k * k
        w = self.rng.normal(0.0, np.sqrt(2.0 / fan_in), (out_ch, self.ch, k, k))
        b = self.rng.normal(0.0, 0.1, out_ch) if bias else None
        self.layers.append(Conv2D(w, b, stride=stride, padding=k // 2))
        self.ch = out_ch
        return len(self.layers) - 1

    def bn(self):
        c = self.ch
        self.layers.append(BatchNorm(np.zeros(c), np.ones(c), self.rng.uniform(0.6, 1.4, c),
                                     self.rng.normal(0.0, 0.2, c), eps=1e-5))
        return len(self.layers) - 1

    def relu(self):
        self.layers.append(ReLU())
        return len(self.layers) - 1

    def cbr(self, out_ch, stride=1):
        self.conv(out_ch, stride=stride)
        self.bn()
        return self.relu()

    def head(self):
        self.layers.append(GlobalAvgPool())
        w = self.rng.normal(0.0, np.sqrt(2.0 / self.ch), (NUM_CLASSES, self.ch))
        self.layers.append(Linear(w, self.rng.normal(0.0, 0.1, NUM_CLASSES)))


def _build(spec_name, rng):
    b = _Builder(rng, INPUT_SHAPE[0])
    if spec_name == "tiny3":
        # three resolution stages: 16x16, 8x8, 4x4
        b.cbr(8)
        b.cbr(8)
        b.cbr(12, stride=2)
        b.cbr(12)
        b.cbr(16, stride=2)
        b.cbr(16)
        b.cbr(16)
    elif spec_name == "skipnet":
        stem = b.cbr(8)
        b.cbr(8)
        b.conv(8)
        b.bn()
        b.layers.append(SkipAdd(stem))
        b.relu()
        entry = b.cbr(16, stride=2)
        b.cbr(16)
        b.conv(16)
        b.bn()
        b.layers.append(SkipAdd(entry))
        b.relu()
    elif spec_name == "nobn":
        b.cbr(8)
        b.conv(8, bias=True)  # not followed by BN
        b.relu()
        b.cbr(16, stride=2)
    else:
        raise ValueError(f"unknown fixture {spec_name!r}; choose from {FIXTURES}")
    b.head()
    return ModelGraph(spec_name, INPUT_SHAPE, b.layers).validate()


def _mixture(seed, components=4):
    """Component templates of the data distribution owned by ``seed``."""
    rng = np.random.default_rng([seed, 7919])
    c, h, w = INPUT_SHAPE
    templates = gaussian_filter(rng.normal(0, 1, (components, c, h, w)),
                                sigma=(0, 0, 2.5, 2.5)) * 4.0
    offsets = rng.normal(0.0, 0.8, (components, c, 1, 1))
    scales = rng.uniform(0.3, 1.3, (components, c, 1, 1))
    weights = rng.dirichlet(np.full(components, 2.0))
    return templates + offsets, scales, weights


def _sample(seed, n, rng):
    means, scales, weights = _mixture(seed)
    comp = rng.choice(len(weights), size=n, p=weights)
    noise = gaussian_filter(rng.normal(0, 1, (n,) + INPUT_SHAPE),
                            sigma=(0, 0, _NOISE_SIGMA, _NOISE_SIGMA))
    return means[comp] + scales[comp] * noise


def _normalizer(seed):
    rng = np.random.default_rng([seed, 104729])
    ref = _sample(seed, 2048, rng)
    return ref.mean(axis=(0, 2, 3), keepdims=True)[0], ref.std(axis=(0, 2, 3), keepdims=True)[0]


def fixture_data(seed, n_batches=8, batch_size=32, split="calib"):
    """Batches drawn from the fixture's input distribution, normalized to
    zero mean and unit variance per channel."""
    if split not in _SPLITS:
        raise ValueError(f"split must be one of {sorted(_SPLITS)}")
    mean, std = _normalizer(seed)
    rng = np.random.default_rng([seed, _SPLITS[split]])
    return [((_sample(seed, batch_size, rng) - mean) / std).astype(np.float32)
            for _ in range(n_batches)]


def make_fixture(spec_name, seed=0):
    """Calibrated toy model and its calibration dataset (list of batches)."""
    rng = np.random.default_rng([seed, sum(map(ord, spec_name))])
    model = _build(spec_name, rng)
    data = fixture_data(seed, split="calib")
    return calibrate_bn_stats(model, data), data
