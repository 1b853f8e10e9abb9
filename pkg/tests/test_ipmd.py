import numpy as np
import pytest

from amdp_mirror.amdp import RegularizerSpec, StochasticPolicy, occupancy
from amdp_mirror.envs import FIVE_STATE_CHAIN, EnvSpec, generate
from amdp_mirror.errors import DataError, ParameterError, RunError
from amdp_mirror.ipmd import (
    TRACE_COLUMNS,
    Demonstrations,
    InnerSpec,
    RewardModel,
    dual_gradient,
    dual_objective,
    feature_expectation,
    generate_expert,
    policy_log_gap,
    reward_recovery_error,
    run_ipmd,
    soft_optimum,
)
from amdp_mirror.spmd import CriticSpec

EXACT = InnerSpec(agent_samples=0)


@pytest.fixture(scope="module")
def chain():
    env = generate(FIVE_STATE_CHAIN)
    true = RewardModel(env.true_theta, env.features)
    return env, true


def _exact_expert(env, true, tau=1.0):
    expert, _ = generate_expert(env.mdp, true, tau, 1, rng_seed=0)
    return expert, occupancy(env.mdp.with_cost(true.cost_table()), expert)


def test_reward_model_basics(chain):
    env, true = chain
    assert np.allclose(true.cost_table(), env.mdp.cost)
    assert true.gradient_bound == pytest.approx(1.0)  # one-hot rows
    assert true.regularization_weight == 0.05
    with pytest.raises(ParameterError):
        RewardModel(np.zeros(3), env.features)
    with pytest.raises(ParameterError):
        RewardModel(env.true_theta, env.features, -1.0)


def test_expert_feature_mean_converges(chain):
    env, true = chain
    n = 100_000
    expert, demos = generate_expert(env.mdp, true, 1.0, n, rng_seed=3)
    exact = feature_expectation(env.features, occupancy(env.mdp.with_cost(true.cost_table()), expert))
    rng_feat = env.features.max() - env.features.min()
    assert np.linalg.norm(demos.empirical_features(env.features) - exact) <= 3 * rng_feat / np.sqrt(n)
    assert len(demos) == n


def test_hot_expert_is_uniform(chain):
    env, true = chain
    expert, _ = generate_expert(env.mdp, true, 1e6, 10, rng_seed=0)
    assert np.allclose(expert.probs, 1 / 3, atol=1e-5)


def test_expert_demonstrations_are_seeded(chain):
    env, true = chain
    a = generate_expert(env.mdp, true, 1.0, 500, rng_seed=5)[1]
    b = generate_expert(env.mdp, true, 1.0, 500, rng_seed=5)[1]
    assert np.array_equal(a.pairs, b.pairs)


def test_expert_needs_positive_tau(chain):
    env, true = chain
    with pytest.raises(ParameterError):
        generate_expert(env.mdp, true, 0.0, 10)


def test_demonstrations_jsonl_round_trip(chain):
    env, true = chain
    _, demos = generate_expert(env.mdp, true, 1.0, 50, rng_seed=1)
    text = demos.to_jsonl()
    assert text.splitlines()[1].startswith('{"s": ')
    back = Demonstrations.from_jsonl(text)
    assert np.array_equal(back.pairs, demos.pairs) and back.source == demos.source


def test_empty_demonstrations_rejected():
    with pytest.raises(DataError):
        Demonstrations(np.zeros((0, 2)))
    with pytest.raises(DataError):
        Demonstrations.from_jsonl('{"header": {}}\n')
    with pytest.raises(DataError):
        Demonstrations.from_jsonl('{"s": 1}\n')


def test_gradient_vanishes_for_same_distribution(chain):
    env, true = chain
    expert, d_e = _exact_expert(env, true)
    rm = true.with_theta(np.zeros_like(true.theta))
    rm = RewardModel(rm.theta, rm.features, 0.0)
    rng = np.random.default_rng(0)
    n = 20_000
    idx_a = rng.choice(d_e.size, size=n, p=d_e.ravel())
    idx_b = rng.choice(d_e.size, size=n, p=d_e.ravel())
    A = env.mdp.n_actions
    a = Demonstrations(np.column_stack([idx_a // A, idx_a % A]))
    b = Demonstrations(np.column_stack([idx_b // A, idx_b % A]))
    g = dual_gradient(rm, a, b)
    # each coordinate is a difference of two independent indicator means
    se = np.sqrt(2 * (d_e.ravel() * (1 - d_e.ravel())).sum() / n)
    assert np.linalg.norm(g) <= 3 * se


def test_one_hot_gradient_is_occupancy_difference(chain):
    env, true = chain
    _, d_e = _exact_expert(env, true)
    d_pi = occupancy(env.mdp, StochasticPolicy.uniform(5, 3))
    rm = RewardModel(true.theta, env.features, 0.0)
    assert np.allclose(dual_gradient(rm, d_e, d_pi), (d_e - d_pi).ravel(), atol=1e-15)


@pytest.mark.parametrize("kind", ["one_hot", "tiled", "gaussian"])
def test_gradient_finite_difference(kind):
    env = generate(EnvSpec("chain_features", 5, 3, seed=2, feature_kind=kind, n_features=4))
    true = RewardModel(env.true_theta, env.features)
    _, d_e = _exact_expert(env, true)
    rng = np.random.default_rng(1)
    for _ in range(3):
        rm = true.with_theta(rng.normal(size=true.theta.shape))
        pi, _ = soft_optimum(env.mdp, rm, 1.0)
        g = dual_gradient(rm, d_e, occupancy(env.mdp.with_cost(rm.cost_table()), pi))
        eps = 1e-5
        for i in range(len(g)):
            e = np.zeros_like(rm.theta)
            e[i] = eps
            fd = (dual_objective(env.mdp, rm.with_theta(rm.theta + e), d_e, 1.0) - dual_objective(env.mdp, rm.with_theta(rm.theta - e), d_e, 1.0)) / (2 * eps)
            assert abs(fd - g[i]) <= 1e-4 * max(abs(g[i]), 1e-6)


def test_recovery_error_span_properties(chain):
    _, true = chain
    shifted = true.with_theta(true.theta + 3.0)  # one-hot: a constant cost shift
    assert reward_recovery_error(shifted, true) == pytest.approx(0.0, abs=1e-12)
    doubled = true.with_theta(2 * true.theta)
    assert reward_recovery_error(doubled, true) == pytest.approx(np.ptp(true.cost_table()))


def test_policy_log_gap_zero_at_soft_optimum(chain):
    env, true = chain
    pi, ev = soft_optimum(env.mdp, true, 1.0)
    gap, bound = policy_log_gap(env.mdp, pi, true, 1.0, q_hat=ev.q)
    assert gap <= 1e-12 and bound <= 1e-12
    assert np.isnan(policy_log_gap(env.mdp, pi, true, 1.0)[1])


def test_log_gap_bound_holds_on_trace(chain):
    env, true = chain
    _, demos = generate_expert(env.mdp, true, 1.0, 20_000, rng_seed=0)
    for inner in (InnerSpec(agent_samples=500), InnerSpec(agent_samples=0, eta=0.5)):
        _, _, tr = run_ipmd(env.mdp, env.features, demos, 1.0, 40, 5.0, inner, true_reward=true)
        assert all(g <= b + 1e-12 for g, b in zip(tr.policy_log_gap, tr.log_gap_bound))


def test_trace_lengths_and_csv(chain):
    env, true = chain
    _, d_e = _exact_expert(env, true)
    _, _, tr = run_ipmd(env.mdp, env.features, d_e, 1.0, 7, 1.0, EXACT, true_reward=true)
    for col in (tr.dual_obj, tr.grad_norm, tr.policy_log_gap, tr.reward_span_err, tr.theta_hash):
        assert len(col) == 7
    lines = tr.to_csv().splitlines()
    assert lines[0] == ",".join(TRACE_COLUMNS) and len(lines) == 8
    assert tr.theta_hash[0] == tr.theta_hash[0] and tr.theta_hash[0] != tr.theta_hash[1]


def test_matched_start_leaves_regularizer_gradient(chain):
    env, true = chain
    expert, d_e = _exact_expert(env, true)
    # theta at the truth and the agent already at the expert
    _, _, tr = run_ipmd(env.mdp, env.features, d_e, 1.0, 2, 1.0, EXACT, theta0=true.theta, pi0=expert)
    assert tr.grad_norm[0] == pytest.approx(np.linalg.norm(true.regularizer_gradient()), abs=1e-12)
    _, _, tr0 = run_ipmd(env.mdp, env.features, d_e, 1.0, 3, 1.0, EXACT, theta0=true.theta, pi0=expert, regularization_weight=0.0)
    assert tr0.grad_norm[0] <= 1e-12


def test_feature_matching_fixed_point(chain):
    env, true = chain
    _, d_e = _exact_expert(env, true)
    r, pi, tr = run_ipmd(env.mdp, env.features, d_e, 1.0, 3000, 30.0, EXACT, regularization_weight=0.0, diagnostics=False)
    d_pi = occupancy(env.mdp.with_cost(r.cost_table()), pi)
    assert tr.grad_norm[-1] <= 1e-12
    assert np.max(np.abs(d_pi - d_e)) <= 1e-12
    assert reward_recovery_error(r, true) <= 1e-9


def test_run_is_deterministic(chain):
    env, true = chain
    _, demos = generate_expert(env.mdp, true, 1.0, 5000, rng_seed=0)
    inner = InnerSpec(critic=CriticSpec("noisy", 0.02, 0.05), agent_samples=300)
    a = run_ipmd(env.mdp, env.features, demos, 1.0, 15, 5.0, inner, rng_seed=3, true_reward=true)[2]
    b = run_ipmd(env.mdp, env.features, demos, 1.0, 15, 5.0, inner, rng_seed=3, true_reward=true)[2]
    assert a.to_csv() == b.to_csv() and a.theta_hash == b.theta_hash


def test_cost_guard_clips(chain):
    env, true = chain
    _, d_e = _exact_expert(env, true)
    theta0 = np.full(true.theta.shape, 2e6)
    theta0[0] = -2e6
    _, _, tr = run_ipmd(env.mdp, env.features, d_e, 1.0, 2, 1.0, EXACT, theta0=theta0, diagnostics=False)
    assert tr.clip_events == 2


def test_critic_failure_becomes_run_error(chain):
    env, true = chain
    _, d_e = _exact_expert(env, true)
    inner = InnerSpec(critic=CriticSpec("td", batch_size=500, learning_rate=80.0), agent_samples=0)
    with pytest.raises(RunError) as exc:
        run_ipmd(env.mdp, env.features, d_e, 1.0, 3, 1.0, inner, rng_seed=8)
    assert exc.value.iteration == 0 and exc.value.seed == 8


def test_parameter_checks(chain):
    env, true = chain
    _, d_e = _exact_expert(env, true)
    with pytest.raises(ParameterError):
        run_ipmd(env.mdp, env.features, d_e, 0.0, 3, 1.0)
    with pytest.raises(ParameterError):
        run_ipmd(env.mdp, env.features, d_e, 1.0, 3, -1.0)
    with pytest.raises(DataError):
        run_ipmd(env.mdp, env.features, np.ones((2, 2)), 1.0, 3, 1.0)
