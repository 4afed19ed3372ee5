"""Distilled data: synthetic inputs whose per-layer batch statistics match
the running statistics stored in the model's BN layers."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import model as M
from . import tensor
from .errors import NothingToDistillError

INPUT_TERM = -1  # key of the input-statistics term in per-layer results


@dataclass
class DistillConfig:
    batch_size: int = 32
    iterations: int = 500
    learning_rate: float = 1.0
    momentum: float = 0.9
    seed: int = 0
    include_input_term: bool = True
    epsilon_std: float = tensor.EPS_STD

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")

    def to_dict(self):
        return asdict(self)


@dataclass
class DistilledBatch:
    data: np.ndarray
    loss_history: list = field(default_factory=list)
    final_per_layer_terms: dict = field(default_factory=dict)
    config: DistillConfig = None

    @property
    def final_loss(self):
        return float(sum(a + b for a, b in self.final_per_layer_terms.values()))


def _targets(model, eps_std):
    out = {}
    for j in model.bn_indices:
        bn = model.layers[j]
        out[j] = (bn.mu.astype(np.float64), np.sqrt(bn.sigma2.astype(np.float64) + eps_std))
    return out


def _stat_terms(z, mu, sd, eps_std):
    mean, var = tensor.moments(z)
    std = np.sqrt(var + eps_std)
    dm, ds = mean - mu, std - sd
    return float(dm @ dm), float(ds @ ds), dm, ds


def _loss(model, x, include_input_term, eps_std, want_grad):
    x = np.asarray(x)
    values = M.forward_all(model, x, stop=max(model.bn_indices, default=-1) + 1) \
        if model.bn_indices else []
    terms, injected = {}, {}
    checks = list(_targets(model, eps_std).items())
    if include_input_term:
        c = x.shape[1]
        checks.insert(0, (INPUT_TERM, (np.zeros(c), np.full(c, np.sqrt(1.0 + eps_std)))))
    for j, (mu, sd) in checks:
        # j == INPUT_TERM compares the input itself; j == 0 means a leading BN
        z = x if j in (INPUT_TERM, 0) else values[j - 1]
        mterm, sterm, dm, ds = _stat_terms(z, mu, sd, eps_std)
        terms[j] = (mterm, sterm)
        if want_grad:
            g = tensor.stats_gradient(z, 2.0 * dm, 2.0 * ds, eps_std)
            src = -1 if j in (INPUT_TERM, 0) else j - 1
            injected[src] = injected[src] + g if src in injected else g
    total = float(sum(a + b for a, b in terms.values()))
    grad = M.backward(model, x, values, injected) if want_grad else None
    return total, terms, grad


def bn_stat_loss(model, x, include_input_term=True, eps_std=tensor.EPS_STD):
    """Sum over BN layers of squared mean and std mismatches.

    Returns ``(total, terms)`` where ``terms`` maps a BN layer index (or
    ``INPUT_TERM``) to its ``(mean_term, std_term)`` pair.
    """
    total, terms, _ = _loss(model, x, include_input_term, eps_std, want_grad=False)
    return total, terms


def bn_stat_loss_grad(model, x, include_input_term=True, eps_std=tensor.EPS_STD):
    return _loss(model, x, include_input_term, eps_std, want_grad=True)[2]


def loss_and_grad(model, x, include_input_term=True, eps_std=tensor.EPS_STD):
    total, _, grad = _loss(model, x, include_input_term, eps_std, want_grad=True)
    return total, grad


def initial_batch(model, batch_size, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((batch_size,) + model.input_shape).astype(np.float32)


def generate_distilled_data(model, config=None, callback=None):
    """Gradient descent with momentum on the input batch, starting from a
    seeded standard Gaussian."""
    config = config or DistillConfig()
    if model.num_bn == 0 and not config.include_input_term:
        raise NothingToDistillError("nothing to distill: model has no BN layers "
                                    "and the input term is disabled")
    x = initial_batch(model, config.batch_size, config.seed)
    v = np.zeros_like(x)
    history = []
    for it in range(config.iterations):
        loss, _, grad = _loss(model, x, config.include_input_term, config.epsilon_std, True)
        history.append(loss)
        if callback is not None:
            callback(it, loss)
        v = config.momentum * v - np.float32(config.learning_rate) * grad.astype(np.float32)
        x = x + v
    _, terms, _ = _loss(model, x, config.include_input_term, config.epsilon_std, False)
    return DistilledBatch(x, history, terms, config)
