"""Tabular average-cost MDPs and exact (dense linear algebra) evaluation.

Conventions used throughout the package:

* costs are minimised; a reward ``r`` corresponds to ``c = -r``;
* the negative-entropy regulariser is ``h(s) = tau * sum_a pi(a|s) log pi(a|s)``;
* differential values are the *basic* bias: ``sum_s kappa(s) v(s) = 0``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.sparse.csgraph import connected_components
from scipy.special import xlogy

from .errors import DimensionError, ErgodicityError, NumericalError, ParameterError

ROW_SUM_TOL = 1e-12
STATIONARY_TOL = 1e-10
POWER_ITER_CAP = 100_000
POWER_ITER_TOL = 1e-12


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TabularAmdp:
    """A finite average-cost MDP ``(S, A, P, c)``.

    ``transition[s, a, s']`` is the probability of moving to ``s'`` and
    ``cost[s, a]`` the one-step cost.
    """

    transition: np.ndarray
    cost: np.ndarray

    def __post_init__(self):
        P = _frozen(self.transition)
        c = _frozen(self.cost)
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise DimensionError(f"transition must have shape (S, A, S), got {P.shape}")
        if P.shape[0] < 1 or P.shape[1] < 1:
            raise DimensionError("need at least one state and one action")
        if c.shape != P.shape[:2]:
            raise DimensionError(f"cost shape {c.shape} does not match {P.shape[:2]}")
        if not np.all(np.isfinite(P)) or np.any(P < 0):
            raise ParameterError("transition probabilities must be finite and nonnegative")
        if np.max(np.abs(P.sum(axis=2) - 1.0)) > ROW_SUM_TOL:
            raise ParameterError("transition rows must sum to 1")
        if not np.all(np.isfinite(c)):
            raise ParameterError("cost entries must be finite")
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "cost", c)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    def with_cost(self, cost) -> "TabularAmdp":
        return TabularAmdp(self.transition, cost)

    def to_dict(self) -> dict:
        return {
            "n_states": self.n_states,
            "n_actions": self.n_actions,
            "transition": self.transition.tolist(),
            "cost": self.cost.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TabularAmdp":
        try:
            mdp = cls(np.asarray(d["transition"], dtype=float), np.asarray(d["cost"], dtype=float))
        except KeyError as exc:
            raise DimensionError(f"missing field {exc.args[0]!r}") from None
        if mdp.n_states != d.get("n_states", mdp.n_states) or mdp.n_actions != d.get(
            "n_actions", mdp.n_actions
        ):
            raise DimensionError("declared sizes disagree with array shapes")
        return mdp

    @classmethod
    def from_json(cls, text: str) -> "TabularAmdp":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class StochasticPolicy:
    probs: np.ndarray

    def __post_init__(self):
        p = _frozen(self.probs)
        if p.ndim != 2:
            raise DimensionError(f"policy table must be 2-d, got shape {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ParameterError("policy entries must be finite and nonnegative")
        if np.max(np.abs(p.sum(axis=1) - 1.0)) > ROW_SUM_TOL:
            raise ParameterError("policy rows must sum to 1")
        object.__setattr__(self, "probs", p)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "StochasticPolicy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "StochasticPolicy":
        actions = np.asarray(actions, dtype=int)
        p = np.zeros((actions.size, n_actions))
        p[np.arange(actions.size), actions] = 1.0
        return cls(p)

    @classmethod
    def from_unnormalized(cls, weights) -> "StochasticPolicy":
        w = np.asarray(weights, dtype=float)
        return cls(w / w.sum(axis=1, keepdims=True))

    @property
    def n_states(self) -> int:
        return self.probs.shape[0]

    @property
    def n_actions(self) -> int:
        return self.probs.shape[1]


@dataclass(frozen=True)
class RegularizerSpec:
    """Convex policy regulariser ``h``; ``weight`` is its modulus ``mu_h``."""

    kind: str = "zero"
    weight: float = 0.0

    def __post_init__(self):
        if self.kind not in ("zero", "negative_entropy"):
            raise ParameterError(f"unknown regularizer kind {self.kind!r}")
        if not self.weight >= 0:
            raise ParameterError("regularizer weight must be nonnegative")
        if self.kind == "zero" and self.weight != 0:
            object.__setattr__(self, "weight", 0.0)

    @classmethod
    def negative_entropy(cls, tau: float) -> "RegularizerSpec":
        return cls("negative_entropy", float(tau))

    @property
    def tau(self) -> float:
        return self.weight if self.kind == "negative_entropy" else 0.0

    def evaluate(self, probs) -> np.ndarray:
        """Return ``h`` for each row of ``probs`` (last axis = actions)."""
        probs = np.asarray(probs, dtype=float)
        if self.kind == "zero" or self.weight == 0:
            return np.zeros(probs.shape[:-1])
        return self.weight * xlogy(probs, probs).sum(axis=-1)


ZERO = RegularizerSpec()


@dataclass(frozen=True)
class StationaryDistribution:
    kappa: np.ndarray
    gamma_gap: float = field(init=False)

    def __post_init__(self):
        k = _frozen(self.kappa)
        object.__setattr__(self, "kappa", k)
        object.__setattr__(self, "gamma_gap", float(1.0 - k.min()))


@dataclass(frozen=True)
class DifferentialV:
    v: np.ndarray
    rho: float


@dataclass(frozen=True)
class DifferentialQ:
    q: np.ndarray
    rho: float


def _check_pair(mdp: TabularAmdp, pi: StochasticPolicy):
    if pi.probs.shape != (mdp.n_states, mdp.n_actions):
        raise DimensionError(
            f"policy shape {pi.probs.shape} does not match MDP ({mdp.n_states}, {mdp.n_actions})"
        )


def policy_transition_matrix(mdp: TabularAmdp, pi: StochasticPolicy) -> np.ndarray:
    """State-to-state kernel ``P_pi[s, s'] = sum_a pi(a|s) P(s'|s, a)``."""
    _check_pair(mdp, pi)
    return np.einsum("sa,sat->st", pi.probs, mdp.transition)


def policy_cost(mdp: TabularAmdp, pi: StochasticPolicy, h: RegularizerSpec = ZERO) -> np.ndarray:
    """Per-state expected one-step cost including the regulariser."""
    _check_pair(mdp, pi)
    return (pi.probs * mdp.cost).sum(axis=1) + h.evaluate(pi.probs)


def _period(adj: np.ndarray) -> int:
    # BFS levels from state 0; period = gcd of level differences over edges
    if np.any(np.diag(adj)):
        return 1  # a self-loop in an irreducible chain forces aperiodicity
    n = adj.shape[0]
    level = np.full(n, -1)
    level[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for s in frontier:
            for t in np.flatnonzero(adj[s]):
                if level[t] < 0:
                    level[t] = level[s] + 1
                    nxt.append(t)
        frontier = nxt
    g = 0
    src, dst = np.nonzero(adj)
    for s, t in zip(src, dst):
        g = np.gcd(g, abs(level[s] + 1 - level[t]))
    return int(g)


def check_ergodic(P_pi: np.ndarray) -> None:
    """Raise :class:`ErgodicityError` unless the chain is irreducible and aperiodic."""
    adj = np.asarray(P_pi) > 0
    n_comp, labels = connected_components(adj, directed=True, connection="strong")
    if n_comp > 1:
        classes = [np.flatnonzero(labels == i).tolist() for i in range(n_comp)]
        raise ErgodicityError(f"reducible chain: communicating classes {classes}")
    d = _period(adj)
    if d > 1:
        raise ErgodicityError(f"periodic chain with period {d}")


def _power_iteration(P: np.ndarray) -> np.ndarray:
    k = np.full(P.shape[0], 1.0 / P.shape[0])
    for _ in range(POWER_ITER_CAP):
        nxt = k @ P
        if np.max(np.abs(nxt - k)) < POWER_ITER_TOL:
            return nxt / nxt.sum()
        k = nxt
    raise ErgodicityError(
        f"power iteration did not converge within {POWER_ITER_CAP} iterations"
    )


def stationary_distribution(P_pi, check: bool = True) -> StationaryDistribution:
    """Unique stationary distribution of an ergodic row-stochastic matrix."""
    P = np.asarray(P_pi, dtype=float)
    n = P.shape[0]
    if P.ndim != 2 or P.shape[1] != n or n == 0:
        raise DimensionError(f"expected a square matrix, got shape {P.shape}")
    if check:
        check_ergodic(P)
    # kappa (P - I) = 0 with one balance equation replaced by sum(kappa) = 1
    A = (P - np.eye(n)).T
    A[-1, :] = 1.0
    b = np.zeros(n)
    b[-1] = 1.0
    try:
        kappa = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        kappa = None
    if kappa is None or np.max(np.abs(kappa @ P - kappa)) > STATIONARY_TOL or np.any(kappa < 0):
        kappa = _power_iteration(P)
    kappa = np.clip(kappa, 0.0, None)
    kappa = kappa / kappa.sum()
    if check and np.any(kappa <= 0):
        raise ErgodicityError("stationary distribution has zero entries")
    return StationaryDistribution(kappa)


def state_distribution(mdp: TabularAmdp, pi: StochasticPolicy) -> np.ndarray:
    return stationary_distribution(policy_transition_matrix(mdp, pi)).kappa


def occupancy(mdp: TabularAmdp, pi: StochasticPolicy) -> np.ndarray:
    """Stationary state-action distribution ``d(s, a) = kappa(s) pi(a|s)``."""
    return state_distribution(mdp, pi)[:, None] * pi.probs


def average_cost(mdp: TabularAmdp, pi: StochasticPolicy, h: RegularizerSpec = ZERO) -> float:
    kappa = state_distribution(mdp, pi)
    return float(kappa @ policy_cost(mdp, pi, h))


@dataclass(frozen=True)
class PolicyEvaluation:
    """Everything the exact evaluator knows about one policy."""

    v: np.ndarray
    q: np.ndarray
    rho: float
    kappa: np.ndarray


def evaluate_policy(
    mdp: TabularAmdp, pi: StochasticPolicy, h: RegularizerSpec = ZERO
) -> PolicyEvaluation:
    """Solve the average-cost Poisson equations for ``pi``.

    ``v`` is the basic bias (zero mean under ``kappa``) and
    ``q(s, a) = c(s, a) + h(s) - rho + sum_s' P(s'|s, a) v(s')``.
    """
    P_pi = policy_transition_matrix(mdp, pi)
    kappa = stationary_distribution(P_pi).kappa
    hs = h.evaluate(pi.probs)
    r = (pi.probs * mdp.cost).sum(axis=1) + hs
    rho = float(kappa @ r)
    n = mdp.n_states
    # (I - P_pi + 1 kappa^T) is the inverse fundamental matrix: nonsingular for ergodic chains
    A = np.eye(n) - P_pi + np.outer(np.ones(n), kappa)
    try:
        v = np.linalg.solve(A, r - rho)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"Poisson system is singular: {exc}") from None
    q = mdp.cost + hs[:, None] - rho + mdp.transition @ v
    return PolicyEvaluation(_frozen(v), _frozen(q), rho, kappa)


def differential_values(
    mdp: TabularAmdp, pi: StochasticPolicy, h: RegularizerSpec = ZERO
) -> tuple[DifferentialV, DifferentialQ, float]:
    """``(V, Q, rho)`` for ``pi``; see :func:`evaluate_policy`."""
    ev = evaluate_policy(mdp, pi, h)
    return DifferentialV(ev.v, ev.rho), DifferentialQ(ev.q, ev.rho), ev.rho


def bellman_residual(
    mdp: TabularAmdp, pi: StochasticPolicy, v, q, rho: float, h: RegularizerSpec = ZERO
) -> float:
    """Max-norm residual of both Poisson equations."""
    hs = h.evaluate(pi.probs)
    r_q = q - (mdp.cost + hs[:, None] - rho + mdp.transition @ v)
    r_v = v - (pi.probs * q).sum(axis=1)
    return float(max(np.max(np.abs(r_q)), np.max(np.abs(r_v))))


def advantage(
    mdp: TabularAmdp,
    pi: StochasticPolicy,
    pi_next: StochasticPolicy,
    h: RegularizerSpec = ZERO,
) -> np.ndarray:
    """Generalised advantage ``psi^pi(s, pi_next(s))`` for every state."""
    _check_pair(mdp, pi_next)
    V, Q, _ = differential_values(mdp, pi, h)
    return (
        (pi_next.probs * Q.q).sum(axis=1)
        - V.v
        + h.evaluate(pi_next.probs)
        - h.evaluate(pi.probs)
    )


def performance_difference_check(
    mdp: TabularAmdp,
    pi: StochasticPolicy,
    pi_next: StochasticPolicy,
    h: RegularizerSpec = ZERO,
) -> float:
    """``|rho(pi') - rho(pi) - E_{kappa(pi')} psi^pi(s, pi'(s))|``."""
    psi = advantage(mdp, pi, pi_next, h)
    kappa_next = state_distribution(mdp, pi_next)
    lhs = average_cost(mdp, pi_next, h) - average_cost(mdp, pi, h)
    return float(abs(lhs - kappa_next @ psi))


def sample_trajectory(
    mdp: TabularAmdp,
    pi: StochasticPolicy,
    n_steps: int,
    rng: np.random.Generator,
    s0: Optional[int] = None,
):
    """Simulate ``n_steps`` transitions; returns arrays ``(states, actions, next_states)``.

    Inverse-CDF sampling on precomputed cumulative tables keeps the loop cheap.
    """
    S, A = mdp.n_states, mdp.n_actions
    pol_cdf = np.cumsum(pi.probs, axis=1)
    pol_cdf[:, -1] = 1.0
    tr_cdf = np.cumsum(mdp.transition, axis=2)
    tr_cdf[:, :, -1] = 1.0
    u_a = rng.random(n_steps)
    u_s = rng.random(n_steps)
    states = np.empty(n_steps, dtype=np.int64)
    actions = np.empty(n_steps, dtype=np.int64)
    s = int(rng.integers(S)) if s0 is None else int(s0)
    for t in range(n_steps):
        a = int(np.searchsorted(pol_cdf[s], u_a[t], side="right"))
        a = min(a, A - 1)
        states[t] = s
        actions[t] = a
        s = min(int(np.searchsorted(tr_cdf[s, a], u_s[t], side="right")), S - 1)
    next_states = np.empty_like(states)
    next_states[:-1] = states[1:]
    next_states[-1] = s
    return states, actions, next_states
