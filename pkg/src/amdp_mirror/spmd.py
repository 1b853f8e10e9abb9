"""Stochastic policy mirror descent for average-cost MDPs.

Each iteration evaluates the current policy (critic) and then takes one prox
step per state (actor). Diagnostics are computed from exact values so that
they stay meaningful when the critic is noisy.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .amdp import (
    PolicyEvaluation,
    RegularizerSpec,
    StochasticPolicy,
    TabularAmdp,
    differential_values,
    evaluate_policy,
    policy_transition_matrix,
    stationary_distribution,
)
from .errors import AmdpError, ConfigurationError, InvariantViolation, OracleError, RunError
from .evaluation import CriticOutput, exact_critic, perturb, td_critic
from .geometry import KL, BregmanGeometry, ProxProblem, actor_prox_numeric, bregman_rows, kl_prox_table

log = logging.getLogger(__name__)

SCHEDULE_KINDS = ("constant_optimized", "inv_mu_k", "weighted_2_over_mu_k", "nonconvex_min")


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes ``eta_k`` and averaging weights ``beta_k``.

    ``mu`` is the net convexity modulus (regulariser minus critic weak
    convexity; equal to ``tau`` for exact tabular critics). The first step of
    the ``1/(mu k)`` rules is infinite, which the KL prox handles as a pure
    soft-greedy step.
    """

    kind: str
    mu: float
    horizon: int
    distance_estimate: float = 1.0
    lipschitz_aggregate: float = 1.0
    sigma_omega: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigurationError(f"unknown schedule kind {self.kind!r}")
        if self.horizon < 0:
            raise ConfigurationError("horizon must be nonnegative")
        if self.kind in ("inv_mu_k", "weighted_2_over_mu_k") and not self.mu > 0:
            raise ConfigurationError(f"schedule {self.kind} needs mu > 0")
        if self.kind == "nonconvex_min" and self.mu == 0:
            raise ConfigurationError("nonconvex_min needs a nonzero mu")
        if self.kind == "constant_optimized":
            if self.distance_estimate <= 0 or self.lipschitz_aggregate**2 + self.sigma_omega**2 <= 0:
                raise ConfigurationError("constant_optimized needs positive constants")

    def eta(self, k: int) -> float:
        K = max(self.horizon, 1)
        if self.kind == "constant_optimized":
            return float(
                np.sqrt(
                    self.distance_estimate
                    / (K * (self.lipschitz_aggregate**2 + self.sigma_omega**2))
                )
            )
        if self.kind == "inv_mu_k":
            return np.inf if k == 0 else 1.0 / (self.mu * k)
        if self.kind == "weighted_2_over_mu_k":
            return np.inf if k == 0 else 2.0 / (self.mu * k)
        return min(abs(self.mu) / 2.0, 1.0 / np.sqrt(K))

    def beta(self, k: int) -> float:
        return float(k + 1) if self.kind == "weighted_2_over_mu_k" else 1.0

    def etas(self) -> np.ndarray:
        return np.array([self.eta(k) for k in range(self.horizon)])

    def telescoping_ok(self, tol: float = 1e-12) -> bool:
        """``beta_k / eta_k <= beta_{k-1} (mu + 1/eta_{k-1})`` for ``1 <= k < K``."""
        mu = self.mu if self.kind != "nonconvex_min" else 0.0
        for k in range(1, self.horizon):
            lhs = self.beta(k) / self.eta(k)
            rhs = self.beta(k - 1) * (mu + 1.0 / self.eta(k - 1))
            if lhs > rhs * (1 + tol) + tol:
                return False
        return True


@dataclass(frozen=True)
class CriticSpec:
    kind: str = "exact"
    bias_bound: float = 0.0
    noise_std: float = 0.0
    batch_size: int = 10_000
    learning_rate: float = 0.05
    epochs: int = 3

    def __post_init__(self):
        if self.kind not in ("exact", "noisy", "td"):
            raise ConfigurationError(f"unknown critic kind {self.kind!r}")
        if self.bias_bound < 0 or self.noise_std < 0:
            raise ConfigurationError("noise parameters must be nonnegative")

    def evaluate(self, mdp, pi, h, seed: int, iteration: int, exact: Optional[PolicyEvaluation] = None) -> CriticOutput:
        """Critic estimate for ``pi``; ``exact`` short-circuits a recomputation."""
        if self.kind in ("exact", "noisy"):
            base = exact_critic(mdp, pi, h) if exact is None else CriticOutput(exact.q, exact.rho)
            if self.kind == "exact":
                return base
            return perturb(base, self.bias_bound, self.noise_std, seed, iteration)
        return td_critic(
            mdp,
            pi,
            h,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            rng_seed=int(np.random.SeedSequence([seed, iteration]).generate_state(1)[0]),
        )


TRACE_COLUMNS = ("k", "rho", "gap", "bregman_to_star", "psi_stationarity", "d_iterates", "eta_k")


@dataclass
class SpmdTrace:
    seed: int
    critic_kind: str = "exact"
    rho: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    bregman_to_star: list = field(default_factory=list)
    psi_stationarity: list = field(default_factory=list)  # max_s |psi(s)|
    psi_max: list = field(default_factory=list)  # max_s psi(s), signed
    d_iterates: list = field(default_factory=list)  # max_s D(pi_k, pi_{k+1})
    d_reverse: list = field(default_factory=list)  # max_s D(pi_{k+1}, pi_k)
    progress_residual: list = field(default_factory=list)
    lower_residual: list = field(default_factory=list)
    eta: list = field(default_factory=list)
    wall_clock: float = 0.0
    rho_final: float = float("nan")

    def __len__(self):
        return len(self.rho)

    @property
    def horizon(self) -> int:
        return len(self.rho)

    def running_average_gap(self) -> float:
        return float(np.mean(self.gap)) if self.gap else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for k in range(len(self)):
            w.writerow(
                [
                    k,
                    repr(self.rho[k]),
                    repr(self.gap[k]),
                    repr(self.bregman_to_star[k]),
                    repr(self.psi_stationarity[k]),
                    repr(self.d_iterates[k]),
                    repr(self.eta[k]),
                ]
            )
        return buf.getvalue()


def _actor_step(q, prev, eta, h: RegularizerSpec, geometry: BregmanGeometry) -> np.ndarray:
    if geometry.kind == "negative_entropy":
        return kl_prox_table(q, prev, eta, h.tau)
    rows = [
        actor_prox_numeric(ProxProblem(q[s], prev[s], eta, h), geometry)
        for s in range(q.shape[0])
    ]
    return np.array(rows)


def soft_greedy(q, tau: float) -> np.ndarray:
    """``argmin_p <q, p> + tau sum p log p`` row-wise (lowest-index argmin when tau = 0)."""
    q = np.asarray(q, dtype=float)
    if tau > 0:
        z = -q / tau
        z -= z.max(axis=1, keepdims=True)
        w = np.exp(z)
        return w / w.sum(axis=1, keepdims=True)
    out = np.zeros_like(q)
    out[np.arange(q.shape[0]), np.argmin(q, axis=1)] = 1.0
    return out


def relative_value_iteration(
    mdp: TabularAmdp, tau: float, tol: float = 1e-13, max_iter: int = 200_000
) -> tuple[float, np.ndarray]:
    """Optimal average cost of the (entropy-)regularised problem by RVI.

    Returns ``(rho, h)`` where ``h`` is the relative value with ``h[0] = 0``.
    ``tol`` is scaled by ``max(1, tau)`` since values grow with ``tau``.
    """
    tol = tol * max(1.0, tau)
    v = np.zeros(mdp.n_states)
    for _ in range(max_iter):
        qv = mdp.cost + mdp.transition @ v
        if tau > 0:
            m = qv.min(axis=1, keepdims=True)
            tv = m[:, 0] - tau * np.log(np.exp(-(qv - m) / tau).sum(axis=1))
        else:
            tv = qv.min(axis=1)
        diff = tv - v
        if diff.max() - diff.min() < tol:
            return float(0.5 * (diff.max() + diff.min())), tv - tv[0]
        v = tv - tv[0]
    raise OracleError(f"relative value iteration did not converge in {max_iter} iterations")


def reference_solution(
    mdp: TabularAmdp,
    h: RegularizerSpec,
    geometry: BregmanGeometry = KL,
    cross_check: bool = True,
    tol: float = 1e-12,
    max_iter: int = 1_000,
) -> tuple[StochasticPolicy, float]:
    """High-precision optimum ``(pi*, rho*)``.

    Runs exact mirror descent with an infinite step (soft policy iteration)
    until ``max_s |psi| <= tol``; optionally cross-checks ``rho*`` against
    relative value iteration. The optimum does not depend on ``geometry``.
    Tolerances are scaled by ``max(1, tau)`` to stay above rounding error.
    """
    tau = h.tau
    scale = max(1.0, tau)
    S, A = mdp.n_states, mdp.n_actions
    pi = StochasticPolicy.uniform(S, A)
    rho = None
    for _ in range(max_iter):
        V, Q, rho = differential_values(mdp, pi, h)
        nxt = soft_greedy(Q.q, tau)
        if tau == 0:
            # keep a deterministic incumbent action on ties so policy iteration terminates
            cur = pi.probs.argmax(axis=1)
            qmin = Q.q.min(axis=1)
            keep = (Q.q[np.arange(S), cur] <= qmin + 1e-12) & (pi.probs.max(axis=1) == 1.0)
            nxt[keep] = pi.probs[keep]
        psi = (nxt * Q.q).sum(axis=1) - V.v + h.evaluate(nxt) - h.evaluate(pi.probs)
        pi = StochasticPolicy(nxt)
        if np.max(np.abs(psi)) <= tol * scale:
            break
    else:
        raise OracleError("reference policy iteration did not reach stationarity")
    _, _, rho = differential_values(mdp, pi, h)
    if cross_check:
        rho_rvi, _ = relative_value_iteration(mdp, tau)
        if abs(rho_rvi - rho) > 1e-9 * scale:
            raise OracleError(
                f"reference disagreement: policy iteration {rho!r} vs RVI {rho_rvi!r}"
            )
    return pi, float(rho)


def run_spmd(
    mdp: TabularAmdp,
    h: RegularizerSpec,
    geometry: BregmanGeometry,
    schedule: StepSchedule,
    critic: CriticSpec = CriticSpec(),
    K: Optional[int] = None,
    rng_seed: int = 0,
    pi0: Optional[StochasticPolicy] = None,
    reference: Optional[tuple[StochasticPolicy, float]] = None,
) -> tuple[StochasticPolicy, SpmdTrace]:
    """Run ``K`` critic/actor iterations (``K`` defaults to the schedule horizon)."""
    K = schedule.horizon if K is None else K
    if schedule.kind in ("inv_mu_k", "weighted_2_over_mu_k") and h.tau == 0:
        raise ConfigurationError(f"schedule {schedule.kind} assumes mu > 0 but the regularizer is zero")
    if geometry.kind == "negative_entropy" and h.kind not in ("zero", "negative_entropy"):
        raise ConfigurationError("unsupported regularizer")
    S, A = mdp.n_states, mdp.n_actions
    pi = pi0 or StochasticPolicy.uniform(S, A)
    if geometry.kind == "negative_entropy" and np.any(pi.probs <= 0):
        raise ConfigurationError("initial policy must be strictly positive under KL geometry")
    if reference is None:
        reference = reference_solution(mdp, h, geometry, cross_check=False)
    pi_star, rho_star = reference
    kappa_star = stationary_distribution(policy_transition_matrix(mdp, pi_star)).kappa
    mu_d = h.tau
    trace = SpmdTrace(seed=rng_seed, critic_kind=critic.kind)
    t0 = time.perf_counter()

    ev = evaluate_policy(mdp, pi, h)
    for k in range(K):
        eta = schedule.eta(k)
        try:
            est = critic.evaluate(mdp, pi, h, rng_seed, k, exact=ev)
        except AmdpError as exc:
            raise RunError(f"critic failed at iteration {k}: {exc}", iteration=k, seed=rng_seed) from exc
        nxt = StochasticPolicy(_actor_step(est.q_estimate, pi.probs, eta, h, geometry))

        psi = (nxt.probs * ev.q).sum(axis=1) - ev.v + h.evaluate(nxt.probs) - h.evaluate(pi.probs)
        d_fwd = bregman_rows(geometry, pi.probs, nxt.probs)
        d_bwd = bregman_rows(geometry, nxt.probs, pi.probs)
        inv_eta = 0.0 if np.isinf(eta) else 1.0 / eta
        try:
            ev2 = evaluate_policy(mdp, nxt, h)
        except AmdpError as exc:
            raise RunError(f"evaluation failed at iteration {k}: {exc}", iteration=k, seed=rng_seed) from exc
        gamma_gap = 1.0 - ev2.kappa.min()
        rho, rho2 = ev.rho, ev2.rho

        trace.rho.append(rho)
        trace.gap.append(rho - rho_star)
        trace.bregman_to_star.append(
            float(kappa_star @ bregman_rows(geometry, pi.probs, pi_star.probs))
        )
        trace.psi_stationarity.append(float(np.max(np.abs(psi))))
        trace.psi_max.append(float(np.max(psi)))
        trace.d_iterates.append(float(np.max(d_fwd)))
        trace.d_reverse.append(float(np.max(d_bwd)))
        # upper bound of the per-iteration progress inequality (should be <= 0)
        trace.progress_residual.append(
            float(np.max(psi + inv_eta * d_fwd + (mu_d + inv_eta) * d_bwd))
        )
        # lower bound: (rho_{k+1} - rho_k) / (1 - Gamma) <= psi(s) for all s
        trace.lower_residual.append(float((rho2 - rho) / (1.0 - gamma_gap) - np.min(psi)))
        trace.eta.append(float(eta))

        pi, ev = nxt, ev2
    trace.rho_final = ev.rho
    trace.wall_clock = time.perf_counter() - t0
    log.debug("spmd seed=%s K=%s final rho=%.6g", rng_seed, K, ev.rho)
    return pi, trace


@dataclass
class MonotonicityReport:
    applicable: bool
    passed: bool
    violations: list = field(default_factory=list)
    max_rho_increase: float = float("nan")
    max_psi: float = float("nan")
    max_progress_residual: float = float("nan")


def monotonicity_check(
    trace: SpmdTrace, schedule: Optional[StepSchedule] = None, tol: float = 1e-10, strict: bool = True
) -> MonotonicityReport:
    """Check monotone decrease of ``rho`` and the per-state progress bounds.

    Only meaningful for exact critics; other traces get a not-applicable report.
    Raises :class:`InvariantViolation` on the first offending iteration when
    ``strict``.
    """
    if trace.critic_kind != "exact":
        return MonotonicityReport(applicable=False, passed=True)
    rhos = list(trace.rho) + [trace.rho_final]
    inc = np.diff(rhos) if len(rhos) > 1 else np.zeros(0)
    report = MonotonicityReport(
        applicable=True,
        passed=True,
        max_rho_increase=float(inc.max()) if inc.size else 0.0,
        max_psi=float(max(trace.psi_max)) if trace.psi_max else 0.0,
        max_progress_residual=float(max(trace.progress_residual)) if trace.progress_residual else 0.0,
    )
    for k in range(len(trace)):
        checks = [
            ("rho increased", inc[k] > tol),
            ("positive advantage", trace.psi_max[k] > tol),
            ("progress upper bound", trace.progress_residual[k] > tol),
            ("progress lower bound", trace.lower_residual[k] > tol),
        ]
        for name, bad in checks:
            if bad:
                report.violations.append((k, name))
    report.passed = not report.violations
    if strict and report.violations:
        k, name = report.violations[0]
        raise InvariantViolation(f"{name} at iteration {k}", index=k)
    return report


RATE_MODELS = {
    "K^-1/2": lambda K: K ** -0.5,
    "K^-1*logK": lambda K: np.log(K) / K,
    "K^-1": lambda K: 1.0 / K,
}


@dataclass(frozen=True)
class RateFit:
    model: str
    intercept: float
    slope: float
    r2: float

    def accepted(self, min_r2: float) -> bool:
        return self.slope > 0 and self.r2 >= min_r2


def fit_rate(horizons: Sequence[float], values: Sequence[float], model: str) -> RateFit:
    """Least squares ``value ~ intercept + slope * f(K)``."""
    if model not in RATE_MODELS:
        raise ValueError(f"unknown rate model {model!r}")
    K = np.asarray(horizons, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(np.unique(K)) < 3 or not np.all(np.isfinite(y)):
        raise ValueError("rate fit needs finite values at >= 3 distinct horizons")
    x = RATE_MODELS[model](K)
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 0.0 if ss_tot == 0 else 1.0 - float((resid**2).sum()) / ss_tot
    slope = float(coef[1])
    if ss_tot == 0:
        slope = 0.0
    return RateFit(model, float(coef[0]), slope, r2)


def rate_fit(traces: Sequence[SpmdTrace], model: str) -> RateFit:
    """Fit per-horizon medians of the running-average gap."""
    by_k: dict[int, list] = {}
    for t in traces:
        by_k.setdefault(t.horizon, []).append(t.running_average_gap())
    ks = sorted(by_k)
    return fit_rate(ks, [float(np.median(by_k[k])) for k in ks], model)
