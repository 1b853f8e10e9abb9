"""Bregman geometry on the probability simplex and the per-state actor prox.

The actor subproblem at one state is

    minimise_p  <q, p> + h(p) + (1/eta) * D(p_prev, p)   over the simplex,

with ``D(a2, a1) = w(a1) - w(a2) - <grad w(a2), a1 - a2>``. Under the
negative-entropy mirror map ``D(a2, a1) = KL(a1 || a2)``; note the argument
order, the *second* argument is the one being measured.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq
from scipy.special import xlogy

from .amdp import RegularizerSpec
from .errors import NumericalError, ParameterError

LOG_FLOOR = 1e-300
GEOMETRIES = ("negative_entropy", "squared_euclidean")


@dataclass(frozen=True)
class BregmanGeometry:
    kind: str = "negative_entropy"

    def __post_init__(self):
        if self.kind not in GEOMETRIES:
            raise ParameterError(f"unknown geometry {self.kind!r}")

    def omega(self, p) -> float:
        p = np.asarray(p, dtype=float)
        if self.kind == "negative_entropy":
            return float(xlogy(p, p).sum())
        return 0.5 * float(p @ p)

    def norm(self, x) -> float:
        """Norm in which ``omega`` is 1-strongly convex."""
        x = np.asarray(x, dtype=float)
        if self.kind == "negative_entropy":
            return float(np.abs(x).sum())
        return float(np.sqrt(x @ x))

    def diameter(self, n_actions: int) -> float:
        """``max D(a1, a2)`` over the simplex (infinite for KL)."""
        return np.inf if self.kind == "negative_entropy" else 1.0


KL = BregmanGeometry("negative_entropy")
EUCLIDEAN = BregmanGeometry("squared_euclidean")


def kl(p, q) -> float:
    """``KL(p || q)``; ``inf`` when ``q`` vanishes where ``p`` does not."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    support = p > 0
    if np.any(q[support] <= 0):
        return np.inf
    return float(np.sum(p[support] * (np.log(p[support]) - np.log(q[support]))))


def bregman_distance(geometry: BregmanGeometry, a2, a1) -> float:
    """``D(a2, a1)``: the divergence of ``a1`` measured from the centre ``a2``."""
    a1 = np.asarray(a1, dtype=float)
    a2 = np.asarray(a2, dtype=float)
    if a1.shape != a2.shape:
        raise ParameterError("distributions must have the same length")
    if geometry.kind == "negative_entropy":
        return max(kl(a1, a2), 0.0)
    d = a1 - a2
    return 0.5 * float(d @ d)


def bregman_rows(geometry: BregmanGeometry, A2, A1) -> np.ndarray:
    """Row-wise ``D(A2[s], A1[s])`` for policy tables."""
    A1 = np.asarray(A1, dtype=float)
    A2 = np.asarray(A2, dtype=float)
    if geometry.kind == "negative_entropy":
        logs = np.log(np.maximum(A1, LOG_FLOOR)) - np.log(np.maximum(A2, LOG_FLOOR))
        out = np.where(A1 > 0, A1 * logs, 0.0).sum(axis=-1)
        out = np.where(np.any((A1 > 0) & (A2 <= 0), axis=-1), np.inf, out)
        return np.maximum(out, 0.0)
    return 0.5 * ((A1 - A2) ** 2).sum(axis=-1)


@dataclass(frozen=True)
class ProxProblem:
    q_row: np.ndarray
    prev_policy_row: np.ndarray
    eta: float
    regularizer: RegularizerSpec = RegularizerSpec()

    def __post_init__(self):
        q = np.asarray(self.q_row, dtype=float)
        p = np.asarray(self.prev_policy_row, dtype=float)
        if q.shape != p.shape or q.ndim != 1:
            raise ParameterError("q_row and prev_policy_row must be vectors of equal length")
        if not self.eta > 0:
            raise ParameterError(f"step size must be positive, got {self.eta}")
        object.__setattr__(self, "q_row", q)
        object.__setattr__(self, "prev_policy_row", p)

    @property
    def tau(self) -> float:
        return self.regularizer.tau


def prox_objective(p: ProxProblem, x, geometry: BregmanGeometry = KL) -> float:
    x = np.asarray(x, dtype=float)
    h = float(p.regularizer.evaluate(x))
    return float(p.q_row @ x) + h + bregman_distance(geometry, p.prev_policy_row, x) / p.eta


def kl_prox_table(q, prev, eta: float, tau: float) -> np.ndarray:
    """Closed-form KL prox applied to every row of a policy table.

    ``p(a) ~ prev(a)^(1/(1+eta*tau)) * exp(-eta*q(a)/(1+eta*tau))``; ``eta``
    may be ``inf`` (pure soft-greedy step, needs ``tau > 0``).
    """
    q = np.asarray(q, dtype=float)
    logp = np.log(np.maximum(np.asarray(prev, dtype=float), LOG_FLOOR))
    if np.isinf(eta):
        if tau <= 0:
            raise ParameterError("an infinite step needs a positive entropy weight")
        z = -q / tau
    else:
        z = (logp - eta * q) / (1.0 + eta * tau)
    z = z - z.max(axis=-1, keepdims=True)
    w = np.exp(z)
    out = w / w.sum(axis=-1, keepdims=True)
    # never emit exact zeros
    out = np.maximum(out, LOG_FLOOR)
    return out / out.sum(axis=-1, keepdims=True)


def actor_prox_closed_form(p: ProxProblem) -> np.ndarray:
    """Exact minimiser of the prox objective under KL geometry."""
    if p.regularizer.kind not in ("zero", "negative_entropy"):
        raise ParameterError("closed form requires a zero or negative-entropy regularizer")
    return kl_prox_table(p.q_row, p.prev_policy_row, p.eta, p.tau)


def project_simplex(y) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    y = np.asarray(y, dtype=float)
    u = np.sort(y)[::-1]
    css = np.cumsum(u) - 1.0
    idx = np.arange(1, y.size + 1)
    k = np.nonzero(u - css / idx > 0)[0][-1]
    theta = css[k] / (k + 1.0)
    return np.maximum(y - theta, 0.0)


def _coordinate_gradient(p: ProxProblem, geometry: BregmanGeometry, u):
    """Partial derivative of the (separable) objective at ``x = exp(u)``, and its u-slope."""
    tau = p.tau
    g = p.q_row + tau * (u + 1.0)
    dg = np.full_like(u, tau)
    if geometry.kind == "negative_entropy":
        g = g + (u - np.log(p.prev_policy_row)) / p.eta
        dg = dg + 1.0 / p.eta
    else:
        ex = np.exp(u)
        g = g + (ex - p.prev_policy_row) / p.eta
        dg = dg + ex / p.eta
    return g, dg


def _solve_coordinates(p: ProxProblem, geometry: BregmanGeometry, nu: float) -> np.ndarray:
    """Solve ``d f_a / d x_a = nu`` for every action (each side is increasing in x_a)."""
    if geometry.kind == "squared_euclidean" and p.tau == 0:
        return np.maximum(0.0, p.prev_policy_row + p.eta * (nu - p.q_row))
    n = p.q_row.size
    if geometry.kind == "negative_entropy":
        # stationarity is affine in u = log x: a single Newton step from 0 is exact
        g, dg = _coordinate_gradient(p, geometry, np.zeros(n))
        return np.exp(np.minimum((nu - g) / dg, 700.0))
    lo = np.full(n, -745.0)
    hi = np.full(n, 5.0)
    u = np.zeros(n)
    for _ in range(300):
        g, dg = _coordinate_gradient(p, geometry, u)
        r = g - nu
        hi = np.where(r > 0, u, hi)
        lo = np.where(r <= 0, u, lo)
        step = r / dg
        un = u - step
        outside = (un <= lo) | (un >= hi)
        un = np.where(outside, 0.5 * (lo + hi), un)
        done = np.max(np.abs(un - u)) <= 1e-15 * max(1.0, float(np.max(np.abs(u))))
        u = un
        if done:
            break
    return np.exp(u)


def actor_prox_numeric(p: ProxProblem, geometry: BregmanGeometry = KL) -> np.ndarray:
    """Minimise the prox objective numerically.

    The objective is separable across actions, so its KKT system reduces to a
    scalar equation in the simplex multiplier ``nu``: each coordinate solves
    ``d f_a/d x_a (x_a) = nu`` (safeguarded Newton in log-space), and Brent's
    method finds the ``nu`` that makes the coordinates sum to one.
    """
    n = p.q_row.size
    if geometry.kind == "squared_euclidean" and p.tau == 0 and np.isinf(p.eta):
        out = np.zeros(n)
        out[int(np.argmin(p.q_row))] = 1.0
        return out
    if geometry.kind == "negative_entropy" and np.any(p.prev_policy_row <= 0):
        raise ParameterError("KL prox needs a strictly positive previous policy")

    def excess(nu):
        return float(_solve_coordinates(p, geometry, nu).sum()) - 1.0

    g_one, _ = _coordinate_gradient(p, geometry, np.zeros(n))
    g_unif, _ = _coordinate_gradient(p, geometry, np.full(n, -np.log(n)))
    nu_hi = float(g_one.max())
    nu_lo = float(g_unif.min())
    if geometry.kind == "squared_euclidean" and p.tau == 0:
        g_one = p.q_row + (1.0 - p.prev_policy_row) / p.eta
        nu_hi = float(g_one.max())
        nu_lo = float((p.q_row - p.prev_policy_row / p.eta).min())
    # widen until the root is bracketed (rounding can leave a boundary exactly at zero)
    width = max(1.0, nu_hi - nu_lo)
    while excess(nu_lo) > 0:
        nu_lo -= width
        width *= 2
    while excess(nu_hi) < 0:
        nu_hi += width
        width *= 2
    try:
        nu = brentq(excess, nu_lo, nu_hi, xtol=1e-15, rtol=4 * np.finfo(float).eps, maxiter=500)
    except (RuntimeError, ValueError) as exc:
        raise NumericalError(f"prox multiplier search failed: {exc}") from None
    x = _solve_coordinates(p, geometry, nu)
    return x / x.sum()


def three_point_check(
    p: ProxProblem,
    solution,
    comparator,
    geometry: BregmanGeometry = KL,
    mu_d: float | None = None,
) -> float:
    """Left minus right side of the three-point inequality for the prox step.

    ``q_row`` is taken as the exact action-bias so that the advantage of a
    distribution ``x`` is ``<q, x - prev> + h(x) - h(prev)``. A value ``<= 0``
    means the inequality holds.
    """
    sol = np.asarray(solution, dtype=float)
    comp = np.asarray(comparator, dtype=float)
    prev = p.prev_policy_row
    mu = p.tau if mu_d is None else mu_d
    h = p.regularizer.evaluate

    def psi(x):
        return float(p.q_row @ (x - prev)) + float(h(x)) - float(h(prev))

    lhs = (
        psi(sol)
        + bregman_distance(geometry, prev, sol) / p.eta
        + (mu + 1.0 / p.eta) * bregman_distance(geometry, sol, comp)
    )
    rhs = psi(comp) + bregman_distance(geometry, prev, comp) / p.eta
    return lhs - rhs
