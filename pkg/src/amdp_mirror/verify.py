"""Randomised invariant battery with a machine-readable report."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .amdp import (
    RegularizerSpec,
    StochasticPolicy,
    TabularAmdp,
    check_ergodic,
    occupancy,
    performance_difference_check,
    policy_transition_matrix,
)
from .envs import EnvSpec, generate
from .errors import AmdpError
from .evaluation import (
    SpanOperator,
    bellman_operator_apply,
    contraction_coefficient,
    span_seminorm,
)
from .geometry import KL, ProxProblem, actor_prox_closed_form, actor_prox_numeric, three_point_check
from .ipmd import RewardModel, dual_gradient, dual_objective, generate_expert, soft_optimum
from .spmd import CriticSpec, StepSchedule, monotonicity_check, run_spmd

log = logging.getLogger(__name__)

REPORT_VERSION = 1

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "amdp-mirror invariant report",
    "type": "object",
    "required": ["version", "seed", "passed", "corruption", "checks"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": REPORT_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "passed": {"type": "boolean"},
        "corruption": {"type": ["string", "null"]},
        "checks": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": [
                    "name",
                    "passed",
                    "instances",
                    "max_residual",
                    "tolerance",
                    "failing_instance_seed",
                    "message",
                ],
                "additionalProperties": False,
                "properties": {
                    "name": {"type": "string"},
                    "passed": {"type": "boolean"},
                    "instances": {"type": "integer", "minimum": 0},
                    "max_residual": {"type": ["number", "null"]},
                    "tolerance": {"type": "number"},
                    "failing_instance_seed": {"type": ["integer", "null"]},
                    "message": {"type": "string"},
                },
            },
        },
    },
}

CORRUPTIONS = ("transition_row",)


@dataclass
class CheckResult:
    name: str
    passed: bool = True
    instances: int = 0
    max_residual: float | None = None
    tolerance: float = 0.0
    failing_instance_seed: int | None = None
    message: str = ""

    def record(self, residual: float, instance_seed: int, note: str = ""):
        self.instances += 1
        r = float(residual)
        if self.max_residual is None or r > self.max_residual or np.isnan(r):
            self.max_residual = r
        if not r <= self.tolerance and self.passed:
            self.passed = False
            self.failing_instance_seed = int(instance_seed)
            self.message = note or f"residual {r:.3e} exceeds {self.tolerance:.1e}"


def _instance(seed: int, corruption: str | None, n_states=None, n_actions=None) -> TabularAmdp:
    rng = np.random.default_rng([seed, 99])
    S = n_states or int(rng.integers(2, 7))
    A = n_actions or int(rng.integers(2, 4))
    mdp = generate(EnvSpec("random_dirichlet", S, A, seed=seed)).mdp
    if corruption == "transition_row":
        # state 0 becomes absorbing under every action
        P = mdp.transition.copy()
        P[0] = 0.0
        P[0, :, 0] = 1.0
        mdp = TabularAmdp(P, mdp.cost)
    return mdp


def _random_policy(rng, S, A) -> StochasticPolicy:
    return StochasticPolicy(rng.dirichlet(np.ones(A), size=S))


def _check_ergodicity(seeds, corruption) -> CheckResult:
    res = CheckResult("ergodicity", tolerance=0.0)
    for s in seeds:
        mdp = _instance(s, corruption)
        pi = _random_policy(np.random.default_rng([s, 1]), mdp.n_states, mdp.n_actions)
        try:
            check_ergodic(policy_transition_matrix(mdp, pi))
            res.record(0.0, s)
        except AmdpError:
            res.record(1.0, s, f"policy chain of instance {s} is not ergodic")
    return res


def _check_performance_difference(seeds, corruption) -> CheckResult:
    res = CheckResult("performance_difference", tolerance=1e-9)
    for s in seeds:
        mdp = _instance(s, corruption)
        rng = np.random.default_rng([s, 2])
        for h in (RegularizerSpec(), RegularizerSpec.negative_entropy(1.0)):
            pi = _random_policy(rng, mdp.n_states, mdp.n_actions)
            pi2 = _random_policy(rng, mdp.n_states, mdp.n_actions)
            try:
                res.record(performance_difference_check(mdp, pi, pi2, h), s)
            except AmdpError as exc:
                res.record(np.inf, s, f"instance {s}: {exc}")
    return res


def _check_prox(seeds) -> tuple[CheckResult, CheckResult]:
    agree = CheckResult("prox_closed_form_vs_numeric", tolerance=1e-8)
    three = CheckResult("three_point_inequality", tolerance=1e-10)
    for s in seeds:
        rng = np.random.default_rng([s, 3])
        for _ in range(10):
            A = int(rng.integers(2, 6))
            tau = float(rng.choice([0.0, 0.1, 1.0]))
            p = ProxProblem(
                q_row=rng.normal(size=A) * 3,
                prev_policy_row=rng.dirichlet(np.ones(A)),
                eta=float(10 ** rng.uniform(-2, 2)),
                regularizer=RegularizerSpec.negative_entropy(tau) if tau > 0 else RegularizerSpec(),
            )
            x = actor_prox_closed_form(p)
            agree.record(np.abs(x - actor_prox_numeric(p, KL)).sum(), s)
            comp = rng.dirichlet(np.ones(A))
            three.record(three_point_check(p, x, comp, KL), s)
    return agree, three


def _check_contraction(seeds, corruption) -> CheckResult:
    res = CheckResult("contraction_certificate", tolerance=1e-12)
    for s in seeds:
        mdp = _instance(s, corruption)
        rng = np.random.default_rng([s, 4])
        pi = _random_policy(rng, mdp.n_states, mdp.n_actions)
        J = int(rng.integers(1, 4))
        gamma = contraction_coefficient(mdp, pi, J)
        op = SpanOperator(mdp, pi, RegularizerSpec(), J)
        worst = -np.inf
        for _ in range(50):
            p = rng.normal(size=(mdp.n_states, mdp.n_actions))
            q = rng.normal(size=p.shape)
            num = span_seminorm(bellman_operator_apply(op, p, 0.0) - bellman_operator_apply(op, q, 0.0))
            worst = max(worst, num / span_seminorm(p - q) - gamma)
        res.record(worst, s)
    return res


def _check_monotonicity(seeds, corruption) -> CheckResult:
    res = CheckResult("spmd_monotonicity", tolerance=1e-10)
    h = RegularizerSpec.negative_entropy(1.0)
    for s in seeds[:3]:
        mdp = _instance(s, corruption)
        try:
            _, trace = run_spmd(mdp, h, KL, StepSchedule("inv_mu_k", 1.0, 30), CriticSpec())
        except AmdpError as exc:
            res.record(np.inf, s, f"instance {s}: {exc}")
            continue
        rep = monotonicity_check(trace, strict=False)
        worst = max(rep.max_rho_increase, rep.max_psi, rep.max_progress_residual, max(trace.lower_residual))
        res.record(worst, s)
    return res


def _check_dual_gradient(seeds) -> CheckResult:
    res = CheckResult("dual_gradient_finite_difference", tolerance=1e-4)
    for s in seeds[:3]:
        env = generate(EnvSpec("chain_features", 4, 3, seed=s, feature_kind="gaussian", n_features=3))
        true = RewardModel(env.true_theta, env.features)
        expert, _ = generate_expert(env.mdp, true, 1.0, 1, rng_seed=s)
        d_e = occupancy(env.mdp.with_cost(true.cost_table()), expert)
        theta = np.random.default_rng([s, 5]).normal(size=env.true_theta.shape)
        rm = true.with_theta(theta)
        pi, _ = soft_optimum(env.mdp, rm, 1.0)
        g = dual_gradient(rm, d_e, occupancy(env.mdp.with_cost(rm.cost_table()), pi))
        eps = 1e-5
        for i in range(len(theta)):
            e = np.zeros_like(theta)
            e[i] = eps
            fd = (
                dual_objective(env.mdp, rm.with_theta(theta + e), d_e, 1.0)
                - dual_objective(env.mdp, rm.with_theta(theta - e), d_e, 1.0)
            ) / (2 * eps)
            res.record(abs(fd - g[i]) / max(abs(g[i]), 1e-8), s)
    return res


def run_battery(seed: int = 0, corruption: str | None = None, n_instances: int = 8) -> dict:
    """Run every check on ``n_instances`` random instances derived from ``seed``."""
    if corruption is not None and corruption not in CORRUPTIONS:
        raise ValueError(f"unknown corruption {corruption!r}")
    seeds = [int(x) for x in np.random.default_rng(seed).integers(0, 2**31, size=n_instances)]
    checks: list[CheckResult] = []
    runners: list[Callable[[], object]] = [
        lambda: _check_ergodicity(seeds, corruption),
        lambda: _check_performance_difference(seeds, corruption),
        lambda: _check_prox(seeds),
        lambda: _check_contraction(seeds, corruption),
        lambda: _check_monotonicity(seeds, corruption),
        lambda: _check_dual_gradient(seeds),
    ]
    for run in runners:
        out = run()
        checks.extend(out if isinstance(out, tuple) else [out])
    for c in checks:
        log.info("%s: %s (max residual %s)", c.name, "pass" if c.passed else "FAIL", c.max_residual)
    return {
        "version": REPORT_VERSION,
        "seed": int(seed),
        "passed": all(c.passed for c in checks),
        "corruption": corruption,
        "checks": [_clean(asdict(c)) for c in checks],
    }


def _clean(d: dict) -> dict:
    # JSON has no inf/nan
    r = d["max_residual"]
    if r is not None and not np.isfinite(r):
        d["max_residual"] = None
    return d
