import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from amdp_mirror.amdp import (
    RegularizerSpec,
    StochasticPolicy,
    TabularAmdp,
    advantage,
    average_cost,
    bellman_residual,
    check_ergodic,
    differential_values,
    evaluate_policy,
    performance_difference_check,
    policy_transition_matrix,
    sample_trajectory,
    state_distribution,
    stationary_distribution,
)
from amdp_mirror.errors import DimensionError, ErgodicityError, ParameterError

from conftest import random_mdp, random_policy

ENT1 = RegularizerSpec.negative_entropy(1.0)


def test_transition_rows_must_sum_to_one():
    P = np.array([[[0.5, 0.6]]])
    with pytest.raises(ParameterError):
        TabularAmdp(np.ones((1, 1, 1)) * 0.5, np.zeros((1, 1)))
    with pytest.raises(DimensionError):
        TabularAmdp(P, np.zeros((2, 2)))


def test_negative_probability_rejected():
    P = np.array([[[1.2, -0.2], [0.5, 0.5]], [[0.5, 0.5], [0.5, 0.5]]])
    with pytest.raises(ParameterError):
        TabularAmdp(P, np.zeros((2, 2)))


def test_nonfinite_cost_rejected():
    P = np.full((2, 1, 2), 0.5)
    with pytest.raises(ParameterError):
        TabularAmdp(P, np.array([[np.inf], [0.0]]))


def test_policy_validation():
    with pytest.raises(ParameterError):
        StochasticPolicy(np.array([[0.5, 0.6]]))
    with pytest.raises(ParameterError):
        StochasticPolicy(np.array([[1.5, -0.5]]))


def test_arrays_are_frozen(rng):
    mdp = random_mdp(rng, 3, 2)
    with pytest.raises(ValueError):
        mdp.cost[0, 0] = 1.0


def test_json_round_trip_is_bit_faithful(rng):
    mdp = random_mdp(rng, 4, 3)
    back = TabularAmdp.from_json(mdp.to_json())
    assert np.array_equal(back.transition, mdp.transition)
    assert np.array_equal(back.cost, mdp.cost)
    doc = json.loads(mdp.to_json())
    assert set(doc) == {"n_states", "n_actions", "transition", "cost"}


def test_json_declared_sizes_checked(rng):
    doc = random_mdp(rng, 2, 2).to_dict()
    doc["n_states"] = 3
    with pytest.raises(DimensionError):
        TabularAmdp.from_dict(doc)


# ----- policy_transition_matrix -----


def test_policy_transition_deterministic_case():
    P = np.zeros((3, 2, 3))
    for s in range(3):
        P[s, 0, (s + 1) % 3] = 1.0
        P[s, 1, s] = 1.0
    mdp = TabularAmdp(P, np.zeros((3, 2)))
    pi = StochasticPolicy.deterministic([0, 0, 0], 2)
    assert np.array_equal(policy_transition_matrix(mdp, pi), np.roll(np.eye(3), 1, axis=1))


def test_policy_transition_uniform_average():
    P = np.array([[[1.0, 0.0], [0.0, 1.0]], [[0.5, 0.5], [0.5, 0.5]]])
    mdp = TabularAmdp(P, np.zeros((2, 2)))
    out = policy_transition_matrix(mdp, StochasticPolicy.uniform(2, 2))
    assert np.allclose(out[0], [0.5, 0.5])


def test_policy_transition_matches_triple_loop(rng):
    mdp = random_mdp(rng, 3, 2)
    pi = random_policy(rng, 3, 2)
    ref = np.zeros((3, 3))
    for s in range(3):
        for a in range(2):
            for t in range(3):
                ref[s, t] += pi.probs[s, a] * mdp.transition[s, a, t]
    assert np.allclose(policy_transition_matrix(mdp, pi), ref, atol=1e-15)


def test_policy_shape_mismatch(rng):
    mdp = random_mdp(rng, 3, 2)
    with pytest.raises(DimensionError):
        policy_transition_matrix(mdp, StochasticPolicy.uniform(3, 3))


# ----- stationary distribution -----


def test_stationary_symmetric():
    k = stationary_distribution(np.full((2, 2), 0.5)).kappa
    assert np.allclose(k, [0.5, 0.5], atol=1e-15)


def test_stationary_hand_solved():
    sd = stationary_distribution(np.array([[0.9, 0.1], [0.5, 0.5]]))
    assert np.allclose(sd.kappa, [5 / 6, 1 / 6], atol=1e-12)
    assert sd.gamma_gap == pytest.approx(5 / 6)


def test_identity_is_not_ergodic():
    with pytest.raises(ErgodicityError, match="reducible"):
        stationary_distribution(np.eye(3))


def test_periodic_chain_rejected():
    with pytest.raises(ErgodicityError, match="period"):
        check_ergodic(np.array([[0.0, 1.0], [1.0, 0.0]]))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_stationary_is_fixed_point(S, seed):
    rng = np.random.default_rng(seed)
    P = rng.dirichlet(np.ones(S), size=S) * 0.95 + 0.05 / S
    P /= P.sum(axis=1, keepdims=True)
    k = stationary_distribution(P).kappa
    assert abs(k.sum() - 1) <= 1e-12
    assert np.all(k > 0)
    assert np.max(np.abs(k @ P - k)) <= 1e-10


def test_stationary_solver_paths_agree(rng):
    from amdp_mirror.amdp import _power_iteration

    P = rng.dirichlet(np.ones(5), size=5)
    assert np.allclose(stationary_distribution(P).kappa, _power_iteration(P), atol=1e-10)


# ----- average cost -----


def _two_state():
    P = np.array([[[0.9, 0.1], [0.1, 0.9]], [[0.5, 0.5], [0.5, 0.5]]])
    cost = np.array([[0.0, 1.0], [6.0, 6.0]])
    return TabularAmdp(P, cost)


def test_average_cost_by_hand():
    pi = StochasticPolicy.deterministic([0, 0], 2)
    assert average_cost(_two_state(), pi) == pytest.approx(1.0, abs=1e-12)


def test_constant_cost_average(rng):
    mdp = random_mdp(rng, 4, 3).with_cost(np.full((4, 3), 3.0))
    for _ in range(5):
        assert average_cost(mdp, random_policy(rng, 4, 3)) == pytest.approx(3.0, abs=1e-12)


def test_entropy_of_uniform_enters_with_minus_log2(rng):
    mdp = random_mdp(rng, 3, 2)
    pi = StochasticPolicy.uniform(3, 2)
    assert average_cost(mdp, pi, ENT1) == pytest.approx(average_cost(mdp, pi) - np.log(2), abs=1e-12)


def test_average_cost_matches_long_simulation(rng):
    mdp = random_mdp(rng, 4, 3)
    pi = random_policy(rng, 4, 3)
    n = 1_000_000
    s, a, _ = sample_trajectory(mdp, pi, n, np.random.default_rng(7))
    c = mdp.cost[s, a]
    batches = c.reshape(1000, -1).mean(axis=1)  # batch means absorb autocorrelation
    se = batches.std(ddof=1) / np.sqrt(len(batches))
    assert abs(c.mean() - average_cost(mdp, pi)) <= 3 * se


# ----- differential values -----


def test_constant_cost_gives_zero_bias(rng):
    mdp = random_mdp(rng, 4, 2).with_cost(np.full((4, 2), 0.7))
    V, Q, rho = differential_values(mdp, random_policy(rng, 4, 2))
    assert rho == pytest.approx(0.7)
    assert np.max(np.abs(V.v)) <= 1e-12 and np.max(np.abs(Q.q)) <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1), st.booleans())
def test_bellman_residual_and_normalization(S, A, seed, entropic):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A)
    pi = random_policy(rng, S, A)
    h = ENT1 if entropic else RegularizerSpec()
    pi = StochasticPolicy(np.maximum(pi.probs, 1e-3) / np.maximum(pi.probs, 1e-3).sum(1, keepdims=True))
    ev = evaluate_policy(mdp, pi, h)
    assert bellman_residual(mdp, pi, ev.v, ev.q, ev.rho, h) <= 1e-9
    assert abs(ev.kappa @ ev.v) <= 1e-9
    assert np.max(np.abs(ev.v - (pi.probs * ev.q).sum(1))) <= 1e-9


def test_bias_matches_power_sum(rng):
    # basic bias v = sum_t (P^t r - rho), truncated once the terms vanish
    mdp = random_mdp(rng, 4, 3)
    pi = random_policy(rng, 4, 3)
    V, _, rho = differential_values(mdp, pi)
    P = policy_transition_matrix(mdp, pi)
    term = (pi.probs * mdp.cost).sum(1) - rho
    acc = np.zeros(4)
    for _ in range(1_000_000):
        acc += term
        term = P @ term
        if np.max(np.abs(term)) < 1e-16:
            break
    assert np.max(np.abs(acc - V.v)) <= 1e-4


def test_constant_shift_of_costs(rng):
    mdp = random_mdp(rng, 5, 3)
    pi = random_policy(rng, 5, 3)
    ev = evaluate_policy(mdp, pi)
    ev2 = evaluate_policy(mdp.with_cost(mdp.cost + 2.5), pi)
    assert ev2.rho - ev.rho == pytest.approx(2.5, abs=1e-12)
    assert np.max(np.abs(ev2.v - ev.v)) <= 1e-9
    assert np.max(np.abs(ev2.q - ev.q)) <= 1e-9


# ----- advantage and performance difference -----


def test_advantage_of_same_policy_is_zero(rng):
    mdp = random_mdp(rng, 5, 3)
    pi = random_policy(rng, 5, 3)
    assert np.max(np.abs(advantage(mdp, pi, pi, ENT1))) <= 1e-12


def test_greedy_advantage_is_nonpositive(rng):
    mdp = random_mdp(rng, 5, 3)
    pi = random_policy(rng, 5, 3)
    V, Q, _ = differential_values(mdp, pi)
    greedy = StochasticPolicy.deterministic(Q.q.argmin(axis=1), 3)
    psi = advantage(mdp, pi, greedy)
    assert np.allclose(psi, Q.q.min(axis=1) - V.v, atol=1e-12)
    assert np.all(psi <= 1e-12)


def test_performance_difference_against_independent_sides(rng):
    mdp = random_mdp(rng, 6, 3)
    pi, pi2 = random_policy(rng, 6, 3), random_policy(rng, 6, 3)
    lhs = average_cost(mdp, pi2, ENT1) - average_cost(mdp, pi, ENT1)
    rhs = state_distribution(mdp, pi2) @ advantage(mdp, pi, pi2, ENT1)
    assert abs(lhs - rhs) <= 1e-10
    assert performance_difference_check(mdp, pi, pi, ENT1) <= 1e-12


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_performance_difference_property(S, A, seed):
    rng = np.random.default_rng(seed)
    mdp = random_mdp(rng, S, A)
    pi, pi2 = random_policy(rng, S, A), random_policy(rng, S, A)
    assert performance_difference_check(mdp, pi, pi2) <= 1e-9
    assert performance_difference_check(mdp, pi, pi2, ENT1) <= 1e-9


def test_regularizer_evaluation():
    h = RegularizerSpec.negative_entropy(2.0)
    assert h.evaluate(np.array([[1.0, 0.0]]))[0] == 0.0
    assert h.evaluate(np.array([[0.5, 0.5]]))[0] == pytest.approx(-2 * np.log(2))
    with pytest.raises(ParameterError):
        RegularizerSpec("l2", 1.0)
    with pytest.raises(ParameterError):
        RegularizerSpec.negative_entropy(-1.0)


def test_sample_trajectory_is_seeded(rng):
    mdp = random_mdp(rng, 3, 2)
    pi = random_policy(rng, 3, 2)
    a = sample_trajectory(mdp, pi, 500, np.random.default_rng(3))
    b = sample_trajectory(mdp, pi, 500, np.random.default_rng(3))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    assert np.array_equal(a[0][1:], a[2][:-1])
