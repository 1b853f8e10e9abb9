"""Desk-scale ergodic benchmark MDPs.

Every generator mixes its transition rows with the uniform distribution at
weight ``mixing_floor``, so every entry is at least ``mixing_floor / S`` and
every policy induces an ergodic chain (Doeblin condition).
"""
from __future__ import annotations

import itertools
import json
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .amdp import StochasticPolicy, TabularAmdp, average_cost
from .errors import CapacityError, ParameterError

FAMILIES = ("random_dirichlet", "gridworld_slip", "two_state_analytic", "chain_features")
FEATURE_KINDS = ("one_hot", "tiled", "gaussian")
ENUMERATION_CAP = 1_000_000


@dataclass(frozen=True)
class EnvSpec:
    family: str = "random_dirichlet"
    n_states: int = 6
    n_actions: int = 3
    mixing_floor: float = 0.05
    cost_scale: float = 1.0
    seed: int = 0
    # gridworld_slip
    grid_size: int = 3
    slip: float = 0.1
    # two_state_analytic: P(stay in 0 | 0, a=0) = p, P(go to 0 | 1, a=0) = q
    p: float = 0.9
    q: float = 0.5
    # chain_features
    feature_kind: str = "one_hot"
    n_features: int = 4

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ParameterError(f"unknown env family {self.family!r}")
        if self.n_states < 1 or self.n_actions < 1 or self.grid_size < 1:
            raise ParameterError("sizes must be positive")
        if not 0 < self.mixing_floor < 1:
            raise ParameterError("mixing_floor must lie in (0, 1)")
        if not 0 <= self.slip <= 1:
            raise ParameterError("slip must lie in [0, 1]")
        if self.feature_kind not in FEATURE_KINDS:
            raise ParameterError(f"unknown feature kind {self.feature_kind!r}")
        if self.n_features < 1:
            raise ParameterError("n_features must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ParameterError(f"unknown EnvSpec keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True)
class GeneratedEnv:
    mdp: TabularAmdp
    features: Optional[np.ndarray] = None  # (S, A, d)
    true_theta: Optional[np.ndarray] = None


def _mix(P: np.ndarray, eps: float) -> np.ndarray:
    S = P.shape[-1]
    out = (1.0 - eps) * P + eps / S
    return out / out.sum(axis=-1, keepdims=True)


def _random_dirichlet(spec: EnvSpec, rng) -> GeneratedEnv:
    S, A = spec.n_states, spec.n_actions
    P = rng.dirichlet(np.ones(S), size=(S, A))
    cost = spec.cost_scale * rng.random((S, A))
    return GeneratedEnv(TabularAmdp(_mix(P, spec.mixing_floor), cost))


def _gridworld(spec: EnvSpec, rng) -> GeneratedEnv:
    # actions: up, down, left, right, stay; torus wrap-around
    N = spec.grid_size
    S = N * N
    moves = [(-1, 0), (1, 0), (0, -1), (0, 1), (0, 0)]
    A = len(moves)
    P = np.zeros((S, A, S))
    for r, c in itertools.product(range(N), range(N)):
        s = r * N + c
        for a, (dr, dc) in enumerate(moves):
            for b, (er, ec) in enumerate(moves):
                prob = (1 - spec.slip) if a == b else spec.slip / (A - 1)
                t = ((r + er) % N) * N + (c + ec) % N
                P[s, a, t] += prob
    cell_cost = spec.cost_scale * rng.random(S)
    cell_cost[S - 1] = 0.0  # goal cell
    cost = np.repeat(cell_cost[:, None], A, axis=1) + 0.01 * spec.cost_scale * (
        np.arange(A) != A - 1
    )
    return GeneratedEnv(TabularAmdp(_mix(P, spec.mixing_floor), cost))


def _two_state(spec: EnvSpec) -> GeneratedEnv:
    p, q = spec.p, spec.q
    P = np.array(
        [
            [[p, 1 - p], [1 - p, p]],
            [[q, 1 - q], [1 - q, q]],
        ]
    )
    if P.min() < spec.mixing_floor / 2:
        raise ParameterError("p and q must keep every entry above mixing_floor / 2")
    cost = spec.cost_scale * np.array([[0.0, 1.0], [6.0, 6.0]])
    return GeneratedEnv(TabularAmdp(P, cost))


def two_state_closed_form(spec: EnvSpec, pi: StochasticPolicy) -> tuple[np.ndarray, float]:
    """Analytic stationary distribution and average cost for ``two_state_analytic``."""
    p, q = spec.p, spec.q
    w0, w1 = pi.probs[0, 0], pi.probs[1, 0]
    a = w0 * p + (1 - w0) * (1 - p)  # P_pi[0, 0]
    b = w1 * q + (1 - w1) * (1 - q)  # P_pi[1, 0]
    k0 = b / (1 - a + b)
    kappa = np.array([k0, 1 - k0])
    cost = spec.cost_scale * np.array([[0.0, 1.0], [6.0, 6.0]])
    rho = float(kappa @ (pi.probs * cost).sum(axis=1))
    return kappa, rho


def chain_transitions(n_states: int, slip: float, eps: float) -> np.ndarray:
    """Chain with actions left / stay / right; ``slip`` sends the move to a random action."""
    S, A = n_states, 3
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            for b in range(A):
                prob = (1 - slip) if a == b else slip / (A - 1)
                t = min(max(s + b - 1, 0), S - 1)
                P[s, a, t] += prob
    return _mix(P, eps)


def make_features(kind: str, n_states: int, n_actions: int, n_features: int, rng) -> np.ndarray:
    S, A = n_states, n_actions
    if kind == "one_hot":
        return np.eye(S * A).reshape(S, A, S * A)
    if kind == "tiled":
        # coarse state tiles crossed with actions
        tiles = min(n_features, S)
        tile_of = (np.arange(S) * tiles) // S
        phi = np.zeros((S, A, tiles * A))
        for s in range(S):
            for a in range(A):
                phi[s, a, tile_of[s] * A + a] = 1.0
        return phi
    return rng.standard_normal((S, A, n_features)) / np.sqrt(n_features)


def identifiable_cost(transition: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """Project a cost table off constants and potential-shaping directions.

    Adding ``const + f(s) - sum_s' P(s'|s,a) f(s')`` to a cost changes no
    policy's average cost, so those directions cannot be recovered from
    behaviour. The projection picks the minimum-norm representative.
    """
    S, A = cost.shape
    basis = [np.ones(S * A)]
    for s in range(S):
        e = np.zeros(S)
        e[s] = 1.0
        basis.append((e[:, None] - transition @ e).reshape(-1))
    B = np.array(basis).T
    coef, *_ = np.linalg.lstsq(B, cost.reshape(-1), rcond=None)
    return (cost.reshape(-1) - B @ coef).reshape(S, A)


def _chain_features(spec: EnvSpec, rng) -> GeneratedEnv:
    S = spec.n_states
    P = chain_transitions(S, spec.slip, spec.mixing_floor)
    A = P.shape[1]
    phi = make_features(spec.feature_kind, S, A, spec.n_features, rng)
    d = phi.shape[2]
    if spec.feature_kind == "one_hot":
        raw = spec.cost_scale * rng.random((S, A))
        c = identifiable_cost(P, raw)
        c = spec.cost_scale * c / (c.max() - c.min())
        theta = c.reshape(-1)
    else:
        theta = spec.cost_scale * rng.standard_normal(d)
        c = phi @ theta
    return GeneratedEnv(TabularAmdp(P, c), phi, theta)


def generate(spec: EnvSpec) -> GeneratedEnv:
    rng = np.random.default_rng(spec.seed)
    if spec.family == "random_dirichlet":
        env = _random_dirichlet(spec, rng)
    elif spec.family == "gridworld_slip":
        env = _gridworld(spec, rng)
    elif spec.family == "two_state_analytic":
        env = _two_state(spec)
    else:
        env = _chain_features(spec, rng)
    return env


def enumerate_deterministic_optimum(mdp: TabularAmdp) -> tuple[StochasticPolicy, float]:
    """Best deterministic policy by exhaustive search (ties: lexicographically first)."""
    S, A = mdp.n_states, mdp.n_actions
    if A**S > ENUMERATION_CAP:
        raise CapacityError(f"{A}^{S} deterministic policies exceed the cap {ENUMERATION_CAP}")
    best, best_rho = None, np.inf
    for actions in itertools.product(range(A), repeat=S):
        pi = StochasticPolicy.deterministic(actions, A)
        rho = average_cost(mdp, pi)
        if rho < best_rho - 1e-12:
            best, best_rho = pi, rho
    return best, float(best_rho)


SIX_STATE_BENCHMARK = EnvSpec("random_dirichlet", n_states=6, n_actions=3, seed=6)
FIVE_STATE_CHAIN = EnvSpec("chain_features", n_states=5, n_actions=3, slip=0.1, seed=5)
