import itertools
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zsquant.allocator import (EXACT_STATE_LIMIT, BitAssignment, GroupedSearchParams, SizeDP,
                               dp_optimize, exhaustive_search, grouped_refinement,
                               inverse_optimize, max_joint_evaluations, omega_sum_of,
                               pareto_frontier, random_assignments)
from zsquant.errors import InfeasibleError
from zsquant.quantizer import FULL
from zsquant.sensitivity import (SensitivityEvaluator, build_sensitivity_table,
                                 joint_sensitivity, layer_sensitivity)


def table(omega, counts, bits, layer_ids=None):
    omega = np.asarray(omega, dtype=np.float64)
    return SimpleNamespace(layer_ids=layer_ids or list(range(len(omega))), bit_options=bits,
                           omega=omega, param_counts=list(counts))


def random_table(seed, n_layers, bits=(2, 4, 8), max_count=50):
    rng = np.random.default_rng(seed)
    # larger bit widths are usually, not always, less sensitive
    omega = np.sort(rng.exponential(1.0, (n_layers, len(bits))), axis=1)[:, ::-1]
    omega += rng.normal(0, 0.05, omega.shape).clip(0)
    return table(omega, rng.integers(1, max_count, n_layers), list(bits))


def all_settings(t):
    bits = t.bit_options
    for cols in itertools.product(range(len(bits)), repeat=len(t.layer_ids)):
        size = sum(p * bits[c] for p, c in zip(t.param_counts, cols))
        yield size, omega_sum_of(t.omega, cols)


def test_single_layer_examples():
    t = table([[1.0, 0.1]], [10], [2, 8])
    a = dp_optimize(t, target_bits=80)
    assert a.bits_per_layer == [8] and a.omega_sum == 0.1 and a.size_bits == 80
    b = dp_optimize(t, target_bits=20)
    assert b.bits_per_layer == [2] and b.omega_sum == 1.0


def test_infeasible_reports_minimum():
    t = table([[1.0, 0.1]], [10], [2, 8])
    with pytest.raises(InfeasibleError) as err:
        dp_optimize(t, target_bits=19)
    assert err.value.min_size_bits == 20 and "20" in str(err.value)


def test_six_layers_match_exhaustive_sweep():
    t = random_table(0, 6)
    sizes = sorted({s for s, _ in all_settings(t)})
    for target in np.linspace(sizes[0], sizes[-1], 40).astype(int):
        dp = dp_optimize(t, target_bits=int(target))
        ex = exhaustive_search(t, target_bits=int(target))
        assert dp.omega_sum == ex.omega_sum
        assert dp.size_bits <= target


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10 ** 6), n=st.integers(1, 6), frac=st.floats(0, 1))
def test_dp_matches_brute_force(seed, n, frac):
    t = random_table(seed, n)
    settings_ = list(all_settings(t))
    lo, hi = min(s for s, _ in settings_), max(s for s, _ in settings_)
    target = int(lo + frac * (hi - lo))
    best = min(o for s, o in settings_ if s <= target)
    a = dp_optimize(t, target_bits=target)
    assert a.omega_sum == pytest.approx(best, rel=1e-12, abs=1e-15)
    assert a.size_bits <= target
    assert a.size_bits == sum(p * k for p, k in zip(t.param_counts, a.bits_per_layer))
    assert a.omega_sum == omega_sum_of(t.omega, [t.bit_options.index(k)
                                                 for k in a.bits_per_layer])


def test_tie_breaking_is_deterministic():
    t = table([[0.0, 0.0, 0.0], [0.0, 0.0, 0.0]], [5, 5], [2, 4, 8])
    a = dp_optimize(t, target_bits=1000)
    assert a.bits_per_layer == [2, 2]  # equal sensitivity: smallest size wins
    t = table([[1.0, 0.0], [1.0, 0.0]], [1, 1], [2, 4])
    assert dp_optimize(t, target_bits=6).bits_per_layer == [2, 4]  # lexicographic


def test_bucketed_path_stays_feasible():
    rng = np.random.default_rng(3)
    counts = rng.integers(10 ** 6, 3 * 10 ** 6, 5)
    t = table(rng.random((5, 3)), counts, [2, 4, 8])
    dp = SizeDP(t.omega, counts, [2, 4, 8])
    assert not dp.exact and int(counts.max() * 8 * 5) > EXACT_STATE_LIMIT
    target = int(counts.sum() * 4)
    a = dp_optimize(t, target_bits=target)
    assert a.size_bits <= target
    # bucketing can cost optimality, never feasibility; it should be close here
    assert a.omega_sum <= exhaustive_search(t, target_bits=target).omega_sum + 0.5


def test_frontier_monotone_and_dominant():
    for seed in range(5):
        t = random_table(seed, 5)
        front = pareto_frontier(t)
        sizes = [p.size_bits for p in front]
        om = [p.omega_sum for p in front]
        assert sizes == sorted(set(sizes)) and all(a >= b for a, b in zip(om, om[1:]))
        for size, omega in all_settings(t):
            eligible = [p.omega_sum for p in front if p.size_bits <= size]
            assert eligible and min(eligible) <= omega + 1e-12
        for p in front:
            assert dp_optimize(t, target_bits=p.size_bits).omega_sum == p.omega_sum


def test_frontier_constant_when_bits_do_not_matter():
    t = table(np.full((3, 3), 0.2), [4, 5, 6], [2, 4, 8])
    front = pareto_frontier(t)
    assert len(front) == 1 and front[0].size_bits == 30
    assert front[0].omega_sum == pytest.approx(0.6)


def test_frontier_downsampling():
    t = random_table(4, 8)
    full = pareto_frontier(t)
    few = pareto_frontier(t, num_points=5)
    assert 1 <= len(few) <= 5
    assert {p.size_bits for p in few} <= {p.size_bits for p in full}
    assert few[0].size_bits == full[0].size_bits


def test_pinned_layers():
    t = random_table(5, 4)
    a = dp_optimize(t, target_bits=10 ** 6, pinned={0: 8, 3: 8})
    assert a.bits_per_layer[0] == 8 and a.bits_per_layer[3] == 8
    for p in pareto_frontier(t, pinned={0: 8}):
        assert p.assignment.bits_per_layer[0] == 8


def test_exhaustive_single_layer_and_guard():
    t = table([[0.5, 0.2, 0.1]], [3], [2, 4, 8])
    assert exhaustive_search(t, target_bits=24).bits_per_layer == [8]
    with pytest.raises(ValueError, match="limit"):
        exhaustive_search(random_table(0, 13), target_bits=10 ** 9)
    exhaustive_search(random_table(0, 12, bits=(2, 4, 8)), target_bits=10 ** 9)


def test_inverse_maximizes():
    t = random_table(6, 5)
    target = int(sum(t.param_counts) * 4)
    worst = max(o for s, o in all_settings(t) if s <= target)
    assert inverse_optimize(t, target_bits=target).omega_sum == pytest.approx(worst)


def test_random_assignments_within_budget():
    t = random_table(7, 6)
    target = int(sum(t.param_counts) * 4)
    draws = random_assignments(t, target_bits=target, draws=5, seed=1)
    assert len(draws) == 5 and all(a.size_bits <= target for a in draws)
    assert [a.bits_per_layer for a in draws] == \
        [a.bits_per_layer for a in random_assignments(t, target_bits=target, draws=5, seed=1)]


def test_assignment_json():
    a = BitAssignment([0, 3], [8, 4], 100, 0.5)
    assert a.as_dict() == {0: 8, 3: 4} and a.bits_vector == "8-4"
    assert '"3": 4' in a.to_json()


def test_joint_sensitivity_definitions(tiny3):
    m, data = tiny3
    x = data[0]
    assert joint_sensitivity(m, x, {i: FULL for i in m.quantizable_indices}) == 0.0
    assert joint_sensitivity(m, x, {6: 4}) == layer_sensitivity(m, x, 6, 4)


def test_joint_sensitivity_golden(tiny3):
    # non-additive: the two 4-bit errors partly cancel
    m, data = tiny3
    value = joint_sensitivity(m, data[0], {0: 4, 3: 4})
    assert value == pytest.approx(0.01001154665588525, rel=1e-6)
    assert value != pytest.approx(layer_sensitivity(m, data[0], 0, 4) +
                                  layer_sensitivity(m, data[0], 3, 4), rel=1e-3)


def test_grouped_params_validation():
    with pytest.raises(ValueError):
        GroupedSearchParams(keep_wide=2, keep_narrow=3)
    with pytest.raises(ValueError):
        GroupedSearchParams(group_size=0)


def _nonadditive_scorer(t, seed):
    rng = np.random.default_rng(seed)
    inter = rng.normal(0, 0.3, (len(t.layer_ids),) * 2)

    def score(bits):
        # layers missing from ``bits`` are at full precision and contribute nothing
        err = np.array([t.omega[r, t.bit_options.index(bits[i])] if i in bits else 0.0
                        for r, i in enumerate(t.layer_ids)])
        return float(max(err.sum() + err @ inter @ err, 0.0))
    return score


def _additive_scorer(t):
    def score(bits):
        return sum(t.omega[r, t.bit_options.index(bits[i])]
                   for r, i in enumerate(t.layer_ids) if i in bits)
    return score


def test_grouped_degenerates_to_exhaustive():
    t = random_table(8, 4)
    score = _nonadditive_scorer(t, 1)
    p = GroupedSearchParams(group_size=4, keep_wide=81, keep_narrow=81, num_size_intervals=1)
    for target in (int(sum(t.param_counts) * f) for f in (2.5, 4, 6)):
        g = grouped_refinement(t, score, p, target)
        ex = exhaustive_search(t, target_bits=target, scorer=score)
        assert g.bits_per_layer == ex.bits_per_layer and g.omega_true == ex.omega_true


def test_grouped_with_additive_scorer_matches_dp():
    for seed in range(5):
        t = random_table(seed, 6)
        target = int(sum(t.param_counts) * 4)
        p = GroupedSearchParams(group_size=2, keep_wide=10, keep_narrow=5, num_size_intervals=200)
        g = grouped_refinement(t, _additive_scorer(t), p, target)
        assert g.omega_sum == pytest.approx(dp_optimize(t, target_bits=target).omega_sum)


def test_grouped_budget_and_evaluation_bound():
    for seed in range(5):
        t = random_table(seed, 7)
        counter = SimpleNamespace(calls=0)
        p = GroupedSearchParams(group_size=3, keep_wide=4, keep_narrow=2, num_size_intervals=6)
        target = int(sum(t.param_counts) * 3.5)
        g = grouped_refinement(t, _nonadditive_scorer(t, seed), p, target, counter=counter)
        assert g.size_bits <= target
        assert 0 < counter.calls <= max_joint_evaluations(7, p)


def test_grouped_infeasible():
    t = random_table(0, 3)
    with pytest.raises(InfeasibleError):
        grouped_refinement(t, lambda b: 0.0, GroupedSearchParams(), 1)


def test_grouped_on_tiny3_beats_plain_dp(tiny3):
    m, data = tiny3
    x = data[0]
    ev = SensitivityEvaluator(m, x)
    t = build_sensitivity_table(m, x, [2, 4, 8], evaluator=ev)
    p = GroupedSearchParams(group_size=2, keep_wide=4, keep_narrow=2, num_size_intervals=8)
    for avg_bits in (3, 3.5, 4, 5):
        target = int(sum(t.param_counts) * avg_bits)
        g = grouped_refinement(t, ev.joint, p, target)
        dp = dp_optimize(t, target_bits=target)
        assert g.size_bits <= target
        assert g.omega_true == ev.joint(g.as_dict())
        assert g.omega_true <= ev.joint(dp.as_dict())
