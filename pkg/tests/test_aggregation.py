import itertools
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from opebounds.aggregation import (
    AggregationScheme,
    aggregate,
    aggregated_concentrability,
    all_policy_concentrability,
    best_subset,
    check_policy_constant_on_cells,
    pushforward_concentrability,
    standard_concentrability,
    w_function,
)
from opebounds.instances import example_instance
from opebounds.mdp import InvariantError, MarkovDecisionProcess, MarkovTransitionModel, Policy, occupancy
from opebounds.offline import OfflineDistribution, admissible_distribution
from conftest import random_mdp, random_mtm, random_offline, random_policy


def _brute_force(d, nu, eps):
    best = None
    for r in range(1, d.size + 1):
        for subset in itertools.combinations(range(d.size), r):
            idx = list(subset)
            if d[idx].sum() >= eps:
                ratio = d[idx].sum() / nu[idx].sum() if nu[idx].sum() > 0 else math.inf
                best = ratio if best is None else max(best, ratio)
    return best


def _random_scheme(rng, sizes):
    labels = []
    for s in sizes:
        k = int(rng.integers(1, s + 1))
        lab = np.concatenate([np.arange(k), rng.integers(0, k, size=s - k)])
        labels.append(rng.permutation(lab))
    return AggregationScheme(tuple(labels))


def _constant_on_cells(rng, scheme, A):
    acts = []
    for lab in scheme.labels:
        per_cell = rng.integers(0, A, size=int(lab.max()) + 1)
        acts.append(per_cell[lab])
    return Policy.from_actions(acts, A)


def test_scheme_rejects_gaps():
    with pytest.raises(InvariantError, match="contiguous"):
        AggregationScheme((np.array([0, 2]),))


def test_singleton_cells_recover_transitions(rng):
    m = random_mdp(rng, H=3)
    pe = random_policy(rng, m.layer_sizes, 2, deterministic=True)
    mu = random_offline(rng, m.layer_sizes, 2)
    agg = aggregate(m, mu, AggregationScheme.singletons(m.layer_sizes), pe)
    acts = pe.greedy()
    for h, t in enumerate(agg.transitions):
        np.testing.assert_allclose(t, m.transitions[h][np.arange(m.layer_sizes[h]), acts[h]], atol=1e-12)


def test_single_cell_is_trivial(rng):
    m = random_mdp(rng, H=4)
    pe = random_policy(rng, m.layer_sizes, 2, deterministic=True)
    mu = admissible_distribution(m, random_policy(rng, m.layer_sizes, 2))
    agg = aggregate(m, mu, AggregationScheme.single_cell(m.layer_sizes), pe)
    for t in agg.transitions:
        np.testing.assert_allclose(t, [[1.0]])
    for d in agg.occupancy:
        np.testing.assert_allclose(d, [1.0])


@pytest.mark.parametrize("H", [3, 6, 12])
def test_example_self_transition_probability(H):
    inst = example_instance(H)
    mu = admissible_distribution(inst.mtm, inst.behavior)
    agg = aggregate(inst.mtm, mu, inst.scheme, inst.evaluation)
    for t in agg.transitions:
        assert t[0, 0] >= (H - 1) / (H + 2) - 1e-12
    assert agg.occupancy[-1][0] >= 1 / 41


def test_standard_concentrability_cases(rng):
    m = random_mdp(rng, H=3)
    pe = random_policy(rng, m.layer_sizes, 2)
    mu = OfflineDistribution(occupancy(m, pe).state_actions[:-1])
    assert standard_concentrability(m, mu, pe) == pytest.approx(1.0)
    inst = example_instance(5)
    holes = [l.copy() for l in admissible_distribution(inst.mtm, inst.behavior).layers]
    holes[1][2, 0] = 0.0
    holes[1] /= holes[1].sum()
    assert standard_concentrability(inst.mtm, OfflineDistribution(tuple(holes)), inst.evaluation) == math.inf


@pytest.mark.parametrize("H", [4, 8, 12, 16])
def test_example_all_policy_concentrability_polynomial(H):
    inst = example_instance(H)
    mu = admissible_distribution(inst.mtm, inst.behavior)
    assert all_policy_concentrability(inst.mtm, mu) <= 8 * H**3


def test_one_cell_aggregated_concentrability_is_one(rng):
    m = random_mdp(rng, H=4)
    pe = random_policy(rng, m.layer_sizes, 2, deterministic=True)
    mu = admissible_distribution(m, pe)
    agg = aggregate(m, mu, AggregationScheme.single_cell(m.layer_sizes), pe)
    assert aggregated_concentrability(agg, 0.5).value == pytest.approx(1.0)


def test_example_hand_values():
    inst = example_instance(3)
    mu = admissible_distribution(inst.mtm, inst.behavior)
    agg = aggregate(inst.mtm, mu, inst.scheme, inst.evaluation)
    assert agg.occupancy[2][0] == pytest.approx(4 / 21)
    assert agg.offline_mass[2][0] == pytest.approx(32 / 2187)
    rep = aggregated_concentrability(agg, 0.18)
    assert (rep.layer, rep.cells) == (2, (0,))
    assert rep.value == pytest.approx((4 / 21) / (32 / 2187))


@given(st.integers(0, 2**32 - 1), st.integers(1, 7), st.floats(0.05, 1.0))
def test_exact_search_matches_brute_force(seed, k, eps):
    rng = np.random.default_rng(seed)
    d = rng.dirichlet(np.ones(k))
    nu = rng.dirichlet(np.ones(k)) * rng.uniform(0.2, 1.0)
    got = best_subset(d, nu, eps, exact=True)
    ref = _brute_force(d, nu, eps)
    if ref is None:
        assert got is None
    else:
        assert got[0] == pytest.approx(ref, rel=1e-12)
        heur = best_subset(d, nu, eps, exact=False)
        assert heur is not None and heur[0] <= got[0] * (1 + 1e-12)


def test_heuristic_equals_exact_on_prefix_witness():
    d = np.array([0.4, 0.3, 0.2, 0.1, 0.0])
    nu = np.array([0.1, 0.2, 0.3, 0.3, 0.1])
    assert best_subset(d, nu, 0.5, exact=False)[0] == pytest.approx(best_subset(d, nu, 0.5, exact=True)[0])


def test_large_layers_use_heuristic(rng):
    sizes = (25, 25)
    mtm = random_mtm(rng, sizes=sizes)
    pe = Policy.constant(sizes, 2, 0)
    mu = random_offline(rng, sizes, 2, layers=2)
    rep = aggregated_concentrability(aggregate(mtm, mu, AggregationScheme.singletons(sizes), pe), 0.3)
    assert rep.feasible and not rep.exact


def test_tie_break_prefers_lowest_layer_then_lexicographic():
    d = np.array([0.25, 0.25, 0.25, 0.25])
    nu = np.array([0.25, 0.25, 0.25, 0.25])
    assert best_subset(d, nu, 0.5, exact=True)[1] == (0, 1)


def test_singleton_scheme_matches_per_state_search(rng):
    m = random_mdp(rng, H=3, sizes=(3, 4, 3))
    pe = random_policy(rng, m.layer_sizes, 2, deterministic=True)
    mu = random_offline(rng, m.layer_sizes, 2)
    rep = aggregated_concentrability(aggregate(m, mu, AggregationScheme.singletons(m.layer_sizes), pe), 0.2)
    d = occupancy(m, pe).states
    acts = pe.greedy()
    ref = max(
        r for h in range(2)
        if (r := _brute_force(d[h], mu.layers[h][np.arange(m.layer_sizes[h]), acts[h]], 0.2)) is not None
    )
    assert rep.value == pytest.approx(ref)


def test_scaled_start_can_be_infeasible():
    inst = example_instance(4)
    mu = admissible_distribution(inst.mtm, inst.behavior)
    agg = aggregate(inst.mtm, mu, inst.scheme, inst.evaluation, initial_scale=0.25)
    rep = aggregated_concentrability(agg, 0.5)
    assert not rep.feasible and rep.layer is None and math.isnan(rep.value)


def test_zero_weight_cells_are_flagged():
    inst = example_instance(3)
    layers = [np.array(l) for l in admissible_distribution(inst.mtm, inst.behavior).layers]
    layers[1][2] = 0.0
    layers[1] /= layers[1].sum()
    agg = aggregate(inst.mtm, OfflineDistribution(tuple(layers)), inst.scheme, inst.evaluation)
    assert agg.partially_defined and (1, 1) in agg.undefined_cells
    np.testing.assert_allclose(agg.transitions[1][1], [0.5, 0.5])


def test_stochastic_policy_rejected(rng):
    m = random_mdp(rng)
    agg = aggregate(m, random_offline(rng, m.layer_sizes, 2), AggregationScheme.singletons(m.layer_sizes),
                    Policy.uniform(m.layer_sizes, 2))
    with pytest.raises(ValueError, match="deterministic"):
        aggregated_concentrability(agg, 0.5)


def test_policy_constant_on_cells_check():
    scheme = AggregationScheme((np.array([0, 0]),))
    with pytest.raises(InvariantError, match="cell 0 of layer 0"):
        check_policy_constant_on_cells(scheme, Policy.from_actions([[0, 1]], 2))
    with pytest.warns(UserWarning):
        check_policy_constant_on_cells(scheme, Policy.from_actions([[0, 1]], 2), strict=False)


def test_pushforward_uniform_case():
    t = np.full((2, 3, 2), 0.5)
    mtm = MarkovTransitionModel((2, 2), 3, (t,), np.array([0.5, 0.5]))
    mu = OfflineDistribution((np.full((2, 3), 1 / 6), np.full((2, 3), 1 / 6)))
    pf = pushforward_concentrability(mtm, mu)
    assert (pf.action_factor, pf.state_factor, pf.pushforward) == pytest.approx((3.0, 1.0, 3.0))


def test_pushforward_infinite_on_uncovered_state():
    t = np.zeros((1, 1, 2))
    t[0, 0, 1] = 1.0
    mtm = MarkovTransitionModel((1, 2), 1, (t,), np.ones(1))
    mu = OfflineDistribution((np.ones((1, 1)), np.array([[1.0], [0.0]])))
    assert pushforward_concentrability(mtm, mu).pushforward == math.inf


def test_w_function_hand_instance():
    mtm = MarkovTransitionModel((2,), 2, (), np.array([0.5, 0.5]))
    m = MarkovDecisionProcess.with_mean_rewards(mtm, [np.array([[0.2, 0.0], [0.0, -0.6]])])
    mu = OfflineDistribution((np.array([[0.3, 0.2], [0.1, 0.4]]),))
    pe = Policy.from_actions([[0, 1]], 2)
    assert w_function(m, mu, pe)[0] == pytest.approx(0.3 * 0.2 + 0.4 * -0.6)
    zero = MarkovDecisionProcess.zero_reward(mtm)
    assert w_function(zero, mu, pe)[0] == 0.0


@given(st.integers(0, 2**32 - 1))
def test_aggregated_occupancy_sums_to_one(seed):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng, H=int(rng.integers(2, 5)))
    scheme = _random_scheme(rng, m.layer_sizes)
    pe = _constant_on_cells(rng, scheme, 2)
    agg = aggregate(m, random_offline(rng, m.layer_sizes, 2, layers=m.horizon), scheme, pe)
    for d in agg.occupancy:
        assert d.sum() == pytest.approx(1.0, abs=1e-10)


def random_comparison_case(seed):
    rng = np.random.default_rng(seed)
    m = random_mdp(rng, H=int(rng.integers(2, 5)))
    scheme = _random_scheme(rng, m.layer_sizes)
    pe = _constant_on_cells(rng, scheme, 2)
    mu = random_offline(rng, m.layer_sizes, 2, layers=m.horizon)
    return m, scheme, pe, mu, float(rng.uniform(0.05, 1.0))


def test_aggregated_below_pushforward():
    for seed in range(100):
        m, scheme, pe, mu, eps = random_comparison_case(seed)
        rep = aggregated_concentrability(aggregate(m, mu, scheme, pe), eps)
        assert rep.value <= pushforward_concentrability(m, mu).pushforward * (1 + 1e-12)


def test_aggregated_below_action_factor_power():
    for seed in range(100):
        rng = np.random.default_rng(1000 + seed)
        m = random_mdp(rng, H=int(rng.integers(2, 6)))
        scheme = _random_scheme(rng, m.layer_sizes)
        pe = _constant_on_cells(rng, scheme, 2)
        pb = random_policy(rng, m.layer_sizes, 2)
        c_a = max(float((1.0 / (p * q).sum(axis=1)).max()) for p, q in zip(pe.action_dist, pb.action_dist))
        mu = admissible_distribution(m, pb)
        rep = aggregated_concentrability(aggregate(m, mu, scheme, pe), float(rng.uniform(0.05, 1.0)))
        assert rep.value <= c_a ** m.horizon * (1 + 1e-12)
