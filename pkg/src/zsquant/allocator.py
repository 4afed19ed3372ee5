"""Mixed-precision bit allocation.

Minimize the summed per-layer sensitivity subject to a weight-size budget
``sum(P_i * k_i) <= S_target``, sweep the resulting Pareto frontier, and
optionally refine a solution with a grouped search that re-scores
candidates by their true, jointly-measured sensitivity.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from functools import reduce
from types import SimpleNamespace

import numpy as np

from .errors import InfeasibleError

EXACT_STATE_LIMIT = 1 << 24
BUCKETS = 4096
EXHAUSTIVE_LIMIT = 10 ** 6


@dataclass
class BitAssignment:
    layer_ids: list
    bits_per_layer: list
    size_bits: int
    omega_sum: float
    omega_true: float = None

    def as_dict(self):
        return {int(i): int(k) for i, k in zip(self.layer_ids, self.bits_per_layer)}

    def to_json(self):
        return json.dumps({str(i): k for i, k in self.as_dict().items()}, indent=1)

    @property
    def bits_vector(self):
        return "-".join(str(k) for k in self.bits_per_layer)


@dataclass
class ParetoPoint:
    size_bits: int
    omega_sum: float
    assignment: BitAssignment


@dataclass
class GroupedSearchParams:
    group_size: int = 5        # layers per group
    keep_wide: int = 10        # candidates per size interval re-scored jointly
    keep_narrow: int = 5       # candidates per size interval kept after re-scoring
    num_size_intervals: int = 200

    def __post_init__(self):
        for name in ("group_size", "keep_wide", "keep_narrow", "num_size_intervals"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.keep_narrow > self.keep_wide:
            raise ValueError("keep_narrow must not exceed keep_wide")


def _as_arrays(table, param_counts=None):
    """``(layer_ids, bit_options, omega[L, m], P[L])`` from a table-like object."""
    omega = np.asarray(table.omega, dtype=np.float64)
    counts = table.param_counts if param_counts is None else param_counts
    return list(table.layer_ids), [int(k) for k in table.bit_options], omega, \
        np.asarray(counts, dtype=np.int64)


def omega_sum_of(omega, cols):
    """Canonical left-to-right sum of the chosen table cells."""
    total = 0.0
    for r, c in enumerate(cols):
        total += float(omega[r, c])
    return total


def _make_assignment(layer_ids, bits, omega, counts, cols):
    size = int(sum(int(counts[r]) * bits[c] for r, c in enumerate(cols)))
    return BitAssignment(list(layer_ids), [bits[c] for c in cols], size,
                         omega_sum_of(omega, cols))


class SizeDP:
    """Suffix knapsack tables over model-size states.

    ``best[i][s]`` is the minimal summed sensitivity of layers ``i..L-1``
    whose sizes add up to exactly ``s`` size units (``inf`` if unreachable).
    Disallowed cells carry ``inf`` in ``omega``.
    """

    def __init__(self, omega, counts, bits):
        self.omega = np.asarray(omega, dtype=np.float64)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.bits = list(bits)
        cell = np.outer(self.counts, np.asarray(self.bits, dtype=np.int64))
        max_total = int(cell.max(axis=1).sum()) if cell.size else 0
        self.exact = max_total <= EXACT_STATE_LIMIT
        if self.exact:
            self.unit = reduce(math.gcd, cell.ravel().tolist(), 0) or 1
            self.cell_units = cell // self.unit
        else:
            # conservative: rounding cell sizes up keeps every DP-feasible
            # assignment feasible in exact bits
            self.unit = -(-max_total // BUCKETS)
            self.cell_units = -(-cell // self.unit)
        self.cell_bits = cell
        n_layers = len(self.counts)
        states = int(self.cell_units.max(axis=1).sum()) + 1 if n_layers else 1
        best = np.full((n_layers + 1, states), np.inf)
        best[n_layers, 0] = 0.0
        for i in range(n_layers - 1, -1, -1):
            row = best[i]
            for c in range(len(self.bits)):
                if not np.isfinite(self.omega[i, c]):
                    continue
                u = int(self.cell_units[i, c])
                cand = self.omega[i, c] + best[i + 1, :states - u]
                np.minimum(row[u:], cand, out=row[u:])
        self.best = best

    def min_size_bits(self):
        allowed = np.where(np.isfinite(self.omega), self.cell_bits, np.iinfo(np.int64).max)
        return int(allowed.min(axis=1).sum())

    def _target_units(self, target_bits):
        return int(target_bits // self.unit)

    def best_total(self, target_bits):
        """Size state with minimal sensitivity within the budget (smallest on ties)."""
        limit = min(self._target_units(target_bits), self.best.shape[1] - 1)
        if limit < 0 or not np.isfinite(self.best[0, :limit + 1]).any():
            raise InfeasibleError(
                f"size budget of {target_bits} bits is infeasible; the smallest "
                f"achievable size is {self.min_size_bits()} bits",
                min_size_bits=self.min_size_bits())
        return int(np.argmin(self.best[0, :limit + 1]))

    def reconstruct(self, state):
        """Lexicographically smallest bit columns attaining ``best[0][state]``."""
        cols, r = [], state
        for i in range(len(self.counts)):
            target = self.best[i, r]
            for c in np.argsort(self.bits, kind="stable"):
                u = int(self.cell_units[i, c])
                if u <= r and np.isfinite(self.omega[i, c]) and \
                        self.omega[i, c] + self.best[i + 1, r - u] == target:
                    cols.append(int(c))
                    r -= u
                    break
            else:  # pragma: no cover - tables are self-consistent
                raise RuntimeError("DP reconstruction failed")
        return cols


def _allowed_omega(omega, bits, pinned):
    """Mask cells outside each layer's allowed bit set with ``inf``."""
    if not pinned:
        return omega
    out = omega.copy()
    for r, k in pinned.items():
        out[r, [c for c, b in enumerate(bits) if b != k]] = np.inf
    return out


def dp_optimize(table, param_counts=None, target_bits=None, pinned=None):
    """Minimal-sensitivity assignment with ``sum(P_i * k_i) <= target_bits``.

    ``pinned`` maps a row position to the only bit width that row may take.
    Ties go to the smaller size, then the lexicographically smaller bits.
    """
    layer_ids, bits, omega, counts = _as_arrays(table, param_counts)
    masked = _allowed_omega(omega, bits, pinned)
    dp = SizeDP(masked, counts, bits)
    cols = dp.reconstruct(dp.best_total(target_bits))
    return _make_assignment(layer_ids, bits, omega, counts, cols)


def pareto_frontier(table, param_counts=None, num_points=None, pinned=None):
    """Lower staircase of (size, summed sensitivity) over all bit settings.

    With ``num_points`` the staircase is sampled at that many budgets spread
    evenly over ``[min size, max size]``.
    """
    layer_ids, bits, omega, counts = _as_arrays(table, param_counts)
    dp = SizeDP(_allowed_omega(omega, bits, pinned), counts, bits)
    top = dp.best[0]
    states, running = [], np.inf
    for s in np.flatnonzero(np.isfinite(top)):
        if top[s] < running:
            running = top[s]
            states.append(int(s))
    if num_points is not None and states:
        sizes = np.array(states) * dp.unit
        targets = np.linspace(sizes[0], dp.cell_bits.max(axis=1).sum(), max(int(num_points), 1))
        keep = {states[int(np.searchsorted(sizes, t, side="right")) - 1] for t in targets}
        states = sorted(keep)
    points = []
    for s in states:
        a = _make_assignment(layer_ids, bits, omega, counts, dp.reconstruct(s))
        if points and a.size_bits <= points[-1].size_bits:
            continue
        points.append(ParetoPoint(a.size_bits, a.omega_sum, a))
    return points


def _check_exhaustive(m, n_layers):
    if m ** n_layers > EXHAUSTIVE_LIMIT:
        raise ValueError(f"exhaustive search over {m}^{n_layers} = {m ** n_layers} settings "
                         f"exceeds the {EXHAUSTIVE_LIMIT} limit")


def exhaustive_search(table, param_counts=None, target_bits=None, scorer=None):
    """Optimum by enumeration; the test oracle for the DP and grouped search.

    With ``scorer`` (a callable taking ``{layer_index: k}``) every setting is
    scored by it instead of by the additive table; the returned assignment
    then carries that score in ``omega_true``.
    """
    layer_ids, bits, omega, counts = _as_arrays(table, param_counts)
    n, m = omega.shape
    _check_exhaustive(m, n)
    order = np.argsort(bits, kind="stable")
    if scorer is None:
        return _exhaustive_additive(layer_ids, bits, omega, counts, target_bits, order)
    best_key, best_cols = None, None
    for combo in itertools.product(order, repeat=n):
        cols = list(combo)
        size = int(sum(int(counts[r]) * bits[c] for r, c in enumerate(cols)))
        if size > target_bits:
            continue
        score = float(scorer({layer_ids[r]: bits[c] for r, c in enumerate(cols)}))
        key = (score, size, [bits[c] for c in cols])
        if best_key is None or key < best_key:
            best_key, best_cols = key, cols
    if best_cols is None:
        _raise_infeasible(counts, bits, target_bits)
    a = _make_assignment(layer_ids, bits, omega, counts, best_cols)
    a.omega_true = best_key[0]
    return a


def _raise_infeasible(counts, bits, target_bits):
    min_size = int((counts * min(bits)).sum())
    raise InfeasibleError(f"size budget of {target_bits} bits is infeasible; the smallest "
                          f"achievable size is {min_size} bits", min_size_bits=min_size)


def _exhaustive_additive(layer_ids, bits, omega, counts, target_bits, order):
    """Vectorized enumeration scored by the table, same sums and tie-break."""
    n = len(layer_ids)
    cols = np.array(list(itertools.product(order, repeat=n)), dtype=np.int64).reshape(-1, n)
    bits_arr = np.asarray(bits, dtype=np.int64)
    sizes = (counts[None, :] * bits_arr[cols]).sum(axis=1)
    scores = np.zeros(len(cols))
    for r in range(n):  # left to right, as omega_sum_of
        scores = scores + omega[r, cols[:, r]]
    ok = np.flatnonzero(sizes <= target_bits)
    if not len(ok):
        _raise_infeasible(counts, bits, target_bits)
    # lexsort: last key is primary; bits compared position by position
    keys = [bits_arr[cols[ok, r]] for r in range(n - 1, -1, -1)]
    best = ok[np.lexsort(keys + [sizes[ok], scores[ok]])[0]]
    return _make_assignment(layer_ids, bits, omega, counts, cols[best].tolist())


@dataclass
class _Counter:
    calls: int = 0
    cache: dict = field(default_factory=dict)


def grouped_refinement(table, scorer, params, target_bits, param_counts=None,
                       counter=None):
    """Grouped search that relaxes the independence assumption.

    Layers are processed ``group_size`` at a time. Each stage extends the
    surviving prefixes with every setting of the next group, ranks the
    extensions by survivor true score plus table sensitivities of the new
    group, keeps ``keep_wide`` per size interval, re-scores those with
    ``scorer`` (later layers at full precision) and keeps ``keep_narrow``
    per interval. The answer is the surviving full setting with the lowest
    true score.

    Both rankings add a look-ahead term: the smallest table sensitivity the
    remaining layers can reach within the remaining budget. Without it a
    prefix that spends the whole budget early outranks one that leaves room
    for the later layers.

    ``scorer`` takes ``{layer_index: k}`` and returns the joint sensitivity.
    ``counter`` (optional, any object with a ``calls`` attribute) receives
    the number of joint evaluations.
    """
    layer_ids, bits, omega, counts = _as_arrays(table, param_counts)
    n, m = omega.shape
    bits_arr = np.asarray(bits, dtype=np.int64)
    min_rest = np.concatenate([np.cumsum((counts * bits_arr.min())[::-1])[::-1], [0]])
    max_prefix = np.concatenate([[0], np.cumsum(counts * bits_arr.max())])
    min_prefix = np.concatenate([[0], np.cumsum(counts * bits_arr.min())])
    if min_rest[0] > target_bits:
        raise InfeasibleError(f"size budget of {target_bits} bits is infeasible; the smallest "
                              f"achievable size is {int(min_rest[0])} bits",
                              min_size_bits=int(min_rest[0]))
    dp = SizeDP(omega, counts, bits)
    # lookahead[i][u]: best suffix sensitivity of layers i.. within u size units
    lookahead = np.minimum.accumulate(dp.best, axis=1)

    def rest(stop, used):
        units = np.minimum((target_bits - used) // dp.unit, dp.best.shape[1] - 1)
        return lookahead[stop, units]

    counter = counter if counter is not None else _Counter()
    counter.calls = 0
    order = np.argsort(bits, kind="stable")

    # survivors: column matrix (S, prefix_len), true scores, sizes
    cols = np.zeros((1, 0), dtype=np.int64)
    true = np.zeros(1)
    sizes = np.zeros(1, dtype=np.int64)
    for start in range(0, n, params.group_size):
        stop = min(start + params.group_size, n)
        ext = np.array(list(itertools.product(order, repeat=stop - start)), dtype=np.int64)
        rows = np.arange(start, stop)
        ext_omega = omega[rows, ext].sum(axis=1)
        ext_size = (counts[rows] * bits_arr[ext]).sum(axis=1)
        s_idx = np.repeat(np.arange(len(cols)), len(ext))
        e_idx = np.tile(np.arange(len(ext)), len(cols))
        cand_cols = np.concatenate([cols[s_idx], ext[e_idx]], axis=1)
        cand_size = sizes[s_idx] + ext_size[e_idx]
        feasible = sizes[s_idx] + ext_size[e_idx] + min_rest[stop] <= target_bits
        s_idx, e_idx = s_idx[feasible], e_idx[feasible]
        cand_cols, cand_size = cand_cols[feasible], cand_size[feasible]
        ahead = rest(stop, cand_size)
        cand_est = true[s_idx] + ext_omega[e_idx] + ahead

        lo = min_prefix[stop]
        hi = min(max_prefix[stop], target_bits - min_rest[stop])
        width = max(hi - lo, 1)
        interval = np.minimum((cand_size - lo) * params.num_size_intervals // width,
                              params.num_size_intervals - 1)
        cand_bits = bits_arr[cand_cols]

        new_cols, new_true, new_sizes = [], [], []
        for iv in np.unique(interval):
            members = np.flatnonzero(interval == iv)
            ranked = sorted(members, key=lambda j: (cand_est[j], cand_size[j],
                                                    cand_bits[j].tolist()))
            rescored = []
            for j in ranked[:params.keep_wide]:
                setting = {layer_ids[r]: int(cand_bits[j, r]) for r in range(stop)}
                counter.calls += 1
                score = float(scorer(setting))
                rescored.append((score + ahead[j], int(cand_size[j]),
                                 cand_bits[j].tolist(), j, score))
            rescored.sort(key=lambda t: t[:3])
            for _, size, _, j, score in rescored[:params.keep_narrow]:
                new_cols.append(cand_cols[j])
                new_true.append(score)
                new_sizes.append(size)
        if not new_cols:  # pragma: no cover - guarded by the feasibility check above
            raise InfeasibleError("grouped search lost every feasible candidate")
        cols = np.array(new_cols, dtype=np.int64)
        true = np.array(new_true)
        sizes = np.array(new_sizes, dtype=np.int64)

    keys = [(true[j], int(sizes[j]), bits_arr[cols[j]].tolist()) for j in range(len(cols))]
    best = min(range(len(cols)), key=lambda j: keys[j])
    a = _make_assignment(layer_ids, bits, omega, counts, cols[best].tolist())
    a.omega_true = float(true[best])
    return a


def max_joint_evaluations(n_layers, params):
    """Upper bound on joint evaluations made by :func:`grouped_refinement`."""
    stages = -(-n_layers // params.group_size)
    return stages * params.keep_wide * params.num_size_intervals


def inverse_optimize(table, param_counts=None, target_bits=None, pinned=None):
    """Assignment *maximizing* summed sensitivity within the budget."""
    layer_ids, bits, omega, counts = _as_arrays(table, param_counts)

    neg = SimpleNamespace(layer_ids=layer_ids, bit_options=bits, omega=-omega,
                          param_counts=counts)
    a = dp_optimize(neg, counts, target_bits, pinned)
    a.omega_sum = omega_sum_of(omega, [bits.index(k) for k in a.bits_per_layer])
    return a


def random_assignments(table, param_counts=None, target_bits=None, draws=5, seed=0,
                       max_tries=100000):
    """Uniformly random bit settings that satisfy the budget (rejection sampling)."""
    layer_ids, bits, omega, counts = _as_arrays(table, param_counts)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(max_tries):
        if len(out) == draws:
            break
        cols = rng.integers(0, len(bits), size=len(layer_ids)).tolist()
        a = _make_assignment(layer_ids, bits, omega, counts, cols)
        if a.size_bits <= target_bits:
            out.append(a)
    if len(out) < draws:
        raise InfeasibleError(f"could not draw {draws} random settings within "
                              f"{target_bits} bits")
    return out
