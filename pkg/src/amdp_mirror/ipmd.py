"""Inverse policy mirror descent: MaxEnt IRL through the dual, average-cost form.

The cost model is linear, ``c(s, a; theta) = theta . phi(s, a)``. The exact
dual objective used for diagnostics is

    L(theta) = E_{d^E}[c_theta] - rho*_tau(theta) + w * ||c_theta||_2

where ``rho*_tau`` is the optimal entropy-regularised average cost and the
norm runs over all state-action pairs. By Danskin's theorem its gradient is
``E_{d^E}[phi] - E_{d^{pi_theta}}[phi]`` plus the regulariser term.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .amdp import (
    RegularizerSpec,
    StochasticPolicy,
    TabularAmdp,
    evaluate_policy,
    occupancy,
    sample_trajectory,
)
from .errors import AmdpError, DataError, ParameterError, RunError
from .evaluation import span_seminorm
from .geometry import kl_prox_table
from .spmd import CriticSpec, reference_solution

log = logging.getLogger(__name__)

COST_GUARD = 1e6
DEFAULT_REG_WEIGHT = 0.05


@dataclass(frozen=True)
class RewardModel:
    theta: np.ndarray
    features: np.ndarray  # (S, A, d)
    regularization_weight: float = DEFAULT_REG_WEIGHT

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        phi = np.array(self.features, dtype=float)
        if phi.ndim != 3 or theta.shape != (phi.shape[2],):
            raise ParameterError(f"theta {theta.shape} does not match features {phi.shape}")
        if self.regularization_weight < 0:
            raise ParameterError("regularization weight must be nonnegative")
        theta.setflags(write=False)
        phi.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "features", phi)

    def cost_table(self) -> np.ndarray:
        return self.features @ self.theta

    @property
    def gradient_bound(self) -> float:
        """``L_r = max ||phi(s, a)||_2``."""
        return float(np.sqrt((self.features**2).sum(axis=2)).max())

    def with_theta(self, theta) -> "RewardModel":
        return RewardModel(theta, self.features, self.regularization_weight)

    def regularizer(self) -> float:
        return self.regularization_weight * float(np.linalg.norm(self.cost_table()))

    def regularizer_gradient(self) -> np.ndarray:
        c = self.cost_table()
        n = np.linalg.norm(c)
        if self.regularization_weight == 0 or n == 0:
            return np.zeros_like(self.theta)
        return self.regularization_weight * np.einsum("sad,sa->d", self.features, c) / n

    def to_dict(self) -> dict:
        return {"theta": self.theta.tolist(), "regularization_weight": self.regularization_weight}


@dataclass(frozen=True)
class Demonstrations:
    pairs: np.ndarray  # (N, 2) ints: state, action
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.shape[0] == 0:
            raise DataError("demonstrations are empty")
        pairs.setflags(write=False)
        object.__setattr__(self, "pairs", pairs)

    def __len__(self):
        return self.pairs.shape[0]

    def empirical_occupancy(self, n_states: int, n_actions: int) -> np.ndarray:
        counts = np.zeros((n_states, n_actions))
        np.add.at(counts, (self.pairs[:, 0], self.pairs[:, 1]), 1.0)
        return counts / len(self)

    def empirical_features(self, features) -> np.ndarray:
        phi = np.asarray(features)
        return phi[self.pairs[:, 0], self.pairs[:, 1]].mean(axis=0)

    def to_jsonl(self) -> str:
        lines = [json.dumps({"header": self.source}, sort_keys=True)]
        lines += [json.dumps({"s": int(s), "a": int(a)}) for s, a in self.pairs]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "Demonstrations":
        source, pairs = {}, []
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            if "header" in rec:
                source = rec["header"]
            else:
                try:
                    pairs.append((int(rec["s"]), int(rec["a"])))
                except (KeyError, TypeError, ValueError):
                    raise DataError(f"bad demonstration record: {line!r}") from None
        return cls(np.array(pairs, dtype=np.int64).reshape(-1, 2), source)


Expectation = Union[Demonstrations, np.ndarray]


def feature_expectation(features, data: Expectation) -> np.ndarray:
    """Mean feature under samples or under an exact (S, A) occupancy table."""
    phi = np.asarray(features)
    if isinstance(data, Demonstrations):
        return data.empirical_features(phi)
    d = np.asarray(data, dtype=float)
    if d.shape != phi.shape[:2]:
        raise DataError(f"occupancy shape {d.shape} does not match features {phi.shape}")
    return np.einsum("sa,sad->d", d, phi)


def generate_expert(
    mdp: TabularAmdp,
    true_reward: RewardModel,
    tau: float,
    n_samples: int,
    rng_seed: int = 0,
    burn_in: int = 1_000,
) -> tuple[StochasticPolicy, Demonstrations]:
    """Soft-optimal expert for the true cost and demonstrations from its chain."""
    if not tau > 0:
        raise ParameterError("expert temperature must be positive")
    if n_samples < 1:
        raise ParameterError("need at least one demonstration")
    expert_mdp = mdp.with_cost(true_reward.cost_table())
    expert, _ = reference_solution(expert_mdp, RegularizerSpec.negative_entropy(tau))
    rng = np.random.default_rng(rng_seed)
    s, a, _ = sample_trajectory(expert_mdp, expert, n_samples + burn_in, rng)
    source = {"tau": tau, "seed": rng_seed, "n_samples": n_samples, "burn_in": burn_in}
    return expert, Demonstrations(np.column_stack([s[burn_in:], a[burn_in:]]), source)


def dual_gradient(reward: RewardModel, expert: Expectation, agent: Expectation) -> np.ndarray:
    """``E_E[phi] - E_pi[phi]`` plus the reward-norm regulariser gradient."""
    return (
        feature_expectation(reward.features, expert)
        - feature_expectation(reward.features, agent)
        + reward.regularizer_gradient()
    )


def soft_optimum(mdp: TabularAmdp, reward: RewardModel, tau: float):
    """``(pi_theta, evaluation)`` for the entropy-regularised optimum under ``reward``."""
    h = RegularizerSpec.negative_entropy(tau)
    m = mdp.with_cost(reward.cost_table())
    pi, _ = reference_solution(m, h, cross_check=False)
    return pi, evaluate_policy(m, pi, h)


def dual_objective(mdp: TabularAmdp, reward: RewardModel, expert: Expectation, tau: float) -> float:
    """Exact dual value ``E_E[c] - rho*_tau + w ||c||``."""
    _, ev = soft_optimum(mdp, reward, tau)
    expert_cost = float(feature_expectation(reward.features, expert) @ reward.theta)
    return expert_cost - ev.rho + reward.regularizer()


def reward_recovery_error(learned: RewardModel, true_reward: RewardModel, mdp=None) -> float:
    """Span of the cost difference over all state-action pairs."""
    return span_seminorm(learned.cost_table() - true_reward.cost_table())


def policy_log_gap(
    mdp: TabularAmdp,
    pi_next: StochasticPolicy,
    reward: RewardModel,
    tau: float,
    q_hat: Optional[np.ndarray] = None,
) -> tuple[float, float]:
    """Log-policy distance of ``pi_next`` to the soft optimum under ``reward``.

    Each state's log-policy difference is aligned by its best constant, so the
    gap is ``max_s span_a(log pi_next - log pi_theta) / 2``. If ``q_hat`` (the
    action-bias whose Boltzmann policy is ``pi_next``) is given, the second
    value is the bound ``span(q_hat - Q_theta) / (2 tau)``; otherwise NaN.
    """
    pi_theta, ev = soft_optimum(mdp, reward, tau)
    diff = np.log(np.maximum(pi_next.probs, 1e-300)) - np.log(pi_theta.probs)
    gap = 0.5 * float((diff.max(axis=1) - diff.min(axis=1)).max())
    bound = np.nan if q_hat is None else 0.5 * span_seminorm(q_hat - ev.q) / tau
    return gap, bound


@dataclass(frozen=True)
class InnerSpec:
    critic: CriticSpec = CriticSpec()
    agent_samples: int = 2000  # 0: exact occupancy of the current policy
    eta: float = np.inf
    n_inner: int = 1


TRACE_COLUMNS = ("k", "dual_obj", "grad_norm", "policy_log_gap", "reward_span_err")


@dataclass
class IpmdTrace:
    seed: int
    dual_obj: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    policy_log_gap: list = field(default_factory=list)
    log_gap_bound: list = field(default_factory=list)
    reward_span_err: list = field(default_factory=list)
    theta_hash: list = field(default_factory=list)
    clip_events: int = 0
    wall_clock: float = 0.0

    def __len__(self):
        return len(self.grad_norm)

    def mean_sq_grad(self) -> float:
        return float(np.mean(np.square(self.grad_norm))) if self.grad_norm else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for k in range(len(self)):
            w.writerow(
                [
                    k,
                    repr(self.dual_obj[k]),
                    repr(self.grad_norm[k]),
                    repr(self.policy_log_gap[k]),
                    repr(self.reward_span_err[k]),
                ]
            )
        return buf.getvalue()


def _theta_hash(theta: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(theta).tobytes()).hexdigest()[:16]


def run_ipmd(
    mdp: TabularAmdp,
    features,
    expert: Expectation,
    tau: float,
    K: int,
    alpha0: float,
    inner: InnerSpec = InnerSpec(),
    rng_seed: int = 0,
    theta0=None,
    regularization_weight: float = DEFAULT_REG_WEIGHT,
    true_reward: Optional[RewardModel] = None,
    diagnostics: bool = True,
    pi0: Optional[StochasticPolicy] = None,
) -> tuple[RewardModel, StochasticPolicy, IpmdTrace]:
    """Alternate one critic/actor step with one dual step ``theta -= alpha g``.

    ``alpha = alpha0 / sqrt(K)``. The actor step is the KL prox with step
    ``inner.eta`` (``inf`` gives the Boltzmann policy of the critic estimate).
    ``expert`` may be demonstrations or an exact occupancy table. The agent
    starts from ``pi0`` (uniform by default), which must be strictly positive.
    """
    if not tau > 0:
        raise ParameterError("IPMD needs a positive entropy weight")
    if not alpha0 > 0:
        raise ParameterError("alpha0 must be positive")
    if inner.n_inner < 1:
        raise ParameterError("n_inner must be >= 1")
    phi = np.asarray(features, dtype=float)
    S, A = mdp.n_states, mdp.n_actions
    if phi.shape[:2] != (S, A):
        raise ParameterError(f"features {phi.shape} do not match the MDP ({S}, {A})")
    h = RegularizerSpec.negative_entropy(tau)
    theta = np.zeros(phi.shape[2]) if theta0 is None else np.array(theta0, dtype=float)
    reward = RewardModel(theta, phi, regularization_weight)
    alpha = alpha0 / np.sqrt(max(K, 1))
    rng = np.random.default_rng([rng_seed, 7])
    pi = pi0 or StochasticPolicy.uniform(S, A)
    if pi.probs.shape != (S, A) or np.any(pi.probs <= 0):
        raise ParameterError("initial policy must match the MDP and be strictly positive")
    q_eff = -tau * np.log(pi.probs)  # action-bias whose Boltzmann policy (temperature tau) is pi
    expert_feat = feature_expectation(phi, expert)
    trace = IpmdTrace(seed=rng_seed)
    t0 = time.perf_counter()

    for k in range(K):
        cost = reward.cost_table()
        if np.max(np.abs(cost)) > COST_GUARD:
            trace.clip_events += 1
            log.info("iteration %d: clipping costs at +-%g", k, COST_GUARD)
            cost = np.clip(cost, -COST_GUARD, COST_GUARD)
        mdp_k = mdp.with_cost(cost)
        try:
            pi_k = pi
            for j in range(inner.n_inner):
                ev = evaluate_policy(mdp_k, pi, h)
                est = inner.critic.evaluate(mdp_k, pi, h, rng_seed, k * inner.n_inner + j, exact=ev)
                q_hat = est.q_estimate
                eta = inner.eta
                q_eff = q_hat if np.isinf(eta) else (q_eff + eta * tau * q_hat) / (1.0 + eta * tau)
                pi = StochasticPolicy(kl_prox_table(q_hat, pi.probs, eta, tau))
            d_agent = occupancy(mdp_k, pi_k)
        except AmdpError as exc:
            raise RunError(f"IPMD failed at iteration {k}: {exc}", iteration=k, seed=rng_seed) from exc
        if inner.agent_samples > 0:
            idx = rng.choice(S * A, size=inner.agent_samples, p=d_agent.reshape(-1))
            agent: Expectation = Demonstrations(np.column_stack([idx // A, idx % A]))
        else:
            agent = d_agent
        g = expert_feat - feature_expectation(phi, agent) + reward.regularizer_gradient()

        if diagnostics:
            pi_theta, ev_theta = soft_optimum(mdp, reward, tau)
            trace.dual_obj.append(float(expert_feat @ reward.theta) - ev_theta.rho + reward.regularizer())
            diff = np.log(pi.probs) - np.log(pi_theta.probs)
            trace.policy_log_gap.append(0.5 * float((diff.max(axis=1) - diff.min(axis=1)).max()))
            trace.log_gap_bound.append(0.5 * span_seminorm(q_eff - ev_theta.q) / tau)
            trace.reward_span_err.append(
                reward_recovery_error(reward, true_reward) if true_reward is not None else float("nan")
            )
        else:
            for col in (trace.dual_obj, trace.policy_log_gap, trace.log_gap_bound, trace.reward_span_err):
                col.append(float("nan"))
        trace.grad_norm.append(float(np.linalg.norm(g)))
        trace.theta_hash.append(_theta_hash(reward.theta))

        if not np.all(np.isfinite(g)):
            raise RunError(f"non-finite dual gradient at iteration {k}", iteration=k, seed=rng_seed)
        reward = reward.with_theta(reward.theta - alpha * g)

    trace.wall_clock = time.perf_counter() - t0
    return reward, pi, trace
