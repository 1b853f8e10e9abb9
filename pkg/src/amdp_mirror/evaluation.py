"""Critics and span-seminorm machinery for the policy-evaluation step."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .amdp import (
    ZERO,
    RegularizerSpec,
    StochasticPolicy,
    TabularAmdp,
    differential_values,
    sample_trajectory,
)
from .errors import DimensionError, InstabilityError, ParameterError

log = logging.getLogger(__name__)


def span_seminorm(v) -> float:
    """``max(v) - min(v)``."""
    v = np.asarray(v, dtype=float)
    if v.size == 0:
        raise DimensionError("span of an empty vector")
    return float(v.max() - v.min())


@dataclass(frozen=True)
class NoiseSpec:
    bias_bound: float = 0.0
    noise_std: float = 0.0


@dataclass(frozen=True)
class CriticOutput:
    q_estimate: np.ndarray
    rho_estimate: float
    noise_spec: Optional[NoiseSpec] = None
    residual: float = 0.0


def exact_critic(
    mdp: TabularAmdp, pi: StochasticPolicy, h: RegularizerSpec = ZERO
) -> CriticOutput:
    _, Q, rho = differential_values(mdp, pi, h)
    return CriticOutput(Q.q, rho)


def perturb(exact: CriticOutput, bias_bound: float, noise_std: float, rng_seed: int, iteration: int = 0) -> CriticOutput:
    """Add the seeded bias table and per-iteration Gaussian noise to an exact critic."""
    if bias_bound < 0 or noise_std < 0:
        raise ParameterError("bias bound and noise std must be nonnegative")
    q = exact.q_estimate + bias_table(exact.q_estimate.shape, bias_bound, rng_seed)
    if noise_std > 0:
        noise_rng = np.random.default_rng([rng_seed, 1, iteration])
        q = q + noise_std * noise_rng.standard_normal(q.shape)
    return CriticOutput(q, exact.rho_estimate, NoiseSpec(bias_bound, noise_std))


def bias_table(shape, bias_bound: float, rng_seed: int) -> np.ndarray:
    """Fixed perturbation with span exactly ``bias_bound`` (zero if the bound is 0)."""
    if bias_bound == 0:
        return np.zeros(shape)
    b = np.random.default_rng([rng_seed, 0]).random(shape)
    return bias_bound * (b - b.min()) / (b.max() - b.min())


def noisy_critic(
    mdp: TabularAmdp,
    pi: StochasticPolicy,
    h: RegularizerSpec,
    bias_bound: float,
    noise_std: float,
    rng_seed: int,
    iteration: int = 0,
) -> CriticOutput:
    """Exact critic plus a seed-fixed bias of span ``bias_bound`` and fresh
    zero-mean Gaussian noise (drawn per ``iteration``)."""
    if bias_bound < 0 or noise_std < 0:
        raise ParameterError("bias bound and noise std must be nonnegative")
    return perturb(exact_critic(mdp, pi, h), bias_bound, noise_std, rng_seed, iteration)


def td_critic(
    mdp: TabularAmdp,
    pi: StochasticPolicy,
    h: RegularizerSpec = ZERO,
    batch_size: int = 10_000,
    learning_rate: float = 0.05,
    epochs: int = 5,
    rng_seed: int = 0,
    burn_in: int = 1_000,
) -> CriticOutput:
    """Tabular differential TD(0) on one sampled trajectory.

    The average cost is the batch mean ``rho~`` of ``c + h``; ``q`` is fitted
    by semi-gradient passes over the batch with step ``learning_rate/(1+epoch)``
    and the final pass is Polyak-averaged. The estimate is centred on its
    sample mean, which matches the zero-mean bias convention up to sampling
    error (only differences / spans are meaningful anyway).
    """
    if batch_size < 2 or epochs < 1 or not learning_rate > 0:
        raise ParameterError("td_critic needs batch_size >= 2, epochs >= 1, learning_rate > 0")
    rng = np.random.default_rng(rng_seed)
    states, actions, _ = sample_trajectory(mdp, pi, batch_size + burn_in + 1, rng)
    states, actions = states[burn_in:], actions[burn_in:]
    s, a = states[:-1], actions[:-1]
    s2, a2 = states[1:], actions[1:]
    hs = h.evaluate(pi.probs)
    costs = mdp.cost[s, a] + hs[s]
    rho = float(costs.mean())
    target_const = (costs - rho).tolist()
    s_l, a_l, s2_l, a2_l = s.tolist(), a.tolist(), s2.tolist(), a2.tolist()

    S, A = mdp.n_states, mdp.n_actions
    q = [[0.0] * A for _ in range(S)]
    prev_res = None
    n = len(s_l)
    for epoch in range(epochs):
        lr = learning_rate / (1.0 + epoch)
        last = epoch == epochs - 1
        # lazy Polyak sum for the final pass: entry value times time it was held
        total = [[0.0] * A for _ in range(S)]
        since = [[0] * A for _ in range(S)]
        sq = 0.0
        for t in range(n):
            si, ai = s_l[t], a_l[t]
            delta = target_const[t] + q[s2_l[t]][a2_l[t]] - q[si][ai]
            if last:
                total[si][ai] += q[si][ai] * (t - since[si][ai])
                since[si][ai] = t
            q[si][ai] += lr * delta
            sq += delta * delta
        res = (sq / n) ** 0.5
        if not np.isfinite(res) or (prev_res is not None and res > 10 * prev_res):
            start = "start" if prev_res is None else f"{prev_res:.3g}"
            raise InstabilityError(
                f"TD residual grew from {start} to {res:.3g} in epoch {epoch}; "
                "try a smaller learning rate"
            )
        prev_res = res
    q_now = np.array(q)
    avg = (np.array(total) + q_now * (n - np.array(since))) / n
    q_arr = avg - avg[s, a].mean()
    return CriticOutput(q_arr, rho, None, residual=prev_res)


def state_action_kernel(mdp: TabularAmdp, pi: StochasticPolicy) -> np.ndarray:
    """``K[(s,a), (s',a')] = P(s'|s,a) pi(a'|s')`` as an (SA, SA) matrix."""
    S, A = mdp.n_states, mdp.n_actions
    K = mdp.transition[:, :, :, None] * pi.probs[None, None, :, :]
    return K.reshape(S * A, S * A)


@dataclass(frozen=True)
class SpanOperator:
    """``j_steps``-fold policy Bellman operator on action-bias tables."""

    mdp: TabularAmdp
    pi: StochasticPolicy
    h: RegularizerSpec = ZERO
    j_steps: int = 1

    def __post_init__(self):
        if self.j_steps < 1:
            raise ParameterError("j_steps must be >= 1")

    @property
    def kernel(self) -> np.ndarray:
        return state_action_kernel(self.mdp, self.pi)


def bellman_operator_apply(op: SpanOperator, q, rho: Optional[float] = None) -> np.ndarray:
    """Apply ``T Q = c + h - rho + P_pi Q`` ``op.j_steps`` times."""
    mdp, pi = op.mdp, op.pi
    q = np.asarray(q, dtype=float)
    if q.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(f"q shape {q.shape} does not match the MDP")
    if rho is None:
        _, _, rho = differential_values(mdp, pi, op.h)
    hs = op.h.evaluate(pi.probs)
    base = mdp.cost + hs[:, None] - rho
    for _ in range(op.j_steps):
        v = (pi.probs * q).sum(axis=1)
        q = base + mdp.transition @ v
    return q


def overlap_gamma(kernel) -> float:
    """``1 - min_{i,j} sum_k min(K[i,k], K[j,k])`` for a row-stochastic ``K``."""
    K = np.asarray(kernel, dtype=float)
    best = np.inf
    for i in range(K.shape[0]):
        best = min(best, float(np.minimum(K[i], K).sum(axis=1).min()))
    return float(min(1.0, max(0.0, 1.0 - best)))


def contraction_coefficient(mdp: TabularAmdp, pi: StochasticPolicy, j_steps: int = 1) -> float:
    if j_steps < 1:
        raise ParameterError("j_steps must be >= 1")
    K = np.linalg.matrix_power(state_action_kernel(mdp, pi), j_steps)
    return overlap_gamma(K)


def select_j_steps(
    mdp: TabularAmdp, pi: StochasticPolicy, threshold: float = 0.9
) -> tuple[int, float]:
    """Smallest ``J`` with ``gamma(J) <= threshold``, capped at ``S*A``.

    Returns the cap and its coefficient if the threshold is never met.
    """
    K1 = state_action_kernel(mdp, pi)
    cap = K1.shape[0]
    KJ = K1.copy()
    gamma = overlap_gamma(KJ)
    for j in range(1, cap + 1):
        if gamma <= threshold:
            return j, gamma
        if j < cap:
            KJ = KJ @ K1
            gamma = overlap_gamma(KJ)
    return cap, gamma
