"""Ground-truth Schrodinger bridge and independent cross-checks.

The bridge is obtained by solving the static endpoint problem
``min KL(c || q01)`` over couplings with marginals (mu, nu) by Sinkhorn
scaling, then lifting with the reference bridge conditional. ``brute_force_opt``
reaches the same answer by entropic mirror descent on the full trajectory
tensor and shares no code with the Sinkhorn route.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import mpmath
import numpy as np
from scipy.special import logsumexp

from .process import BridgeConditional, Coupling, MarginalPair, bridge_conditional, endpoint_coupling, lift
from .tensor import DomainError, JointDistribution, kl_divergence, values_of

SCALING_RANGE = (1e-100, 1e100)


class NonConvergenceError(ArithmeticError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class SinkhornConfig:
    tolerance: float = 1e-13
    max_iterations: int = 100_000

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True, eq=False)
class StaticSolution:
    coupling: Coupling
    u: np.ndarray
    v: np.ndarray
    residual: float
    iterations: int
    log_domain: bool = False


@dataclass(frozen=True, eq=False)
class OracleSolution:
    static_coupling: Coupling
    lifted: JointDistribution
    residual: float
    iterations_used: int


def _violation(c: np.ndarray, mu: np.ndarray, nu: np.ndarray) -> float:
    return max(float(np.max(np.abs(c.sum(axis=1) - mu))), float(np.max(np.abs(c.sum(axis=0) - nu))))


def _sinkhorn_log(q01, mu, nu, cfg: SinkhornConfig, log_v0: np.ndarray, used: int):
    log_k = np.log(q01)
    log_mu, log_nu = np.log(mu), np.log(nu)
    log_v = log_v0
    residual = np.inf
    for it in range(used, cfg.max_iterations):
        log_u = log_mu - logsumexp(log_k + log_v[None, :], axis=1)
        log_v = log_nu - logsumexp(log_k + log_u[:, None], axis=0)
        c = np.exp(log_u[:, None] + log_k + log_v[None, :])
        residual = _violation(c, mu, nu)
        if residual <= cfg.tolerance:
            return c, np.exp(log_u), np.exp(log_v), residual, it + 1
    raise NonConvergenceError("log-domain Sinkhorn did not converge", residual)


def solve_static(
    q01,
    marginals: MarginalPair,
    cfg: SinkhornConfig = SinkhornConfig(),
    v0: Optional[np.ndarray] = None,
) -> StaticSolution:
    """KL projection of q01 onto couplings of (mu, nu): diag(u) q01 diag(v)."""
    q01 = np.asarray(q01, dtype=np.float64)
    mu, nu = marginals.mu, marginals.nu
    if q01.shape != (mu.size, nu.size):
        raise DomainError(f"q01 shape {q01.shape} does not match marginals")
    if not np.all(q01 > 0):
        raise DomainError("q01 must be strictly positive")
    v = np.ones(nu.size) if v0 is None else np.asarray(v0, dtype=np.float64)
    lo, hi = SCALING_RANGE
    residual = np.inf
    for it in range(cfg.max_iterations):
        u = mu / (q01 @ v)
        v = nu / (q01.T @ u)
        if min(u.min(), v.min()) < lo or max(u.max(), v.max()) > hi:
            c, u, v, residual, used = _sinkhorn_log(q01, mu, nu, cfg, np.log(v), it)
            return StaticSolution(Coupling(c, mu, nu), u, v, residual, used, log_domain=True)
        c = u[:, None] * q01 * v[None, :]
        residual = _violation(c, mu, nu)
        if residual <= cfg.tolerance:
            return StaticSolution(Coupling(c, mu, nu), u, v, residual, it + 1)
    raise NonConvergenceError(f"Sinkhorn did not reach {cfg.tolerance:g} in {cfg.max_iterations} iterations", residual)


def lift_static(c: Coupling, bridge: BridgeConditional) -> JointDistribution:
    """Trajectory law bridge(x_0, x_1, path) * c(x_0, x_1)."""
    return JointDistribution.normalized(lift(bridge, c.matrix))


def solve_bridge(
    q: JointDistribution,
    marginals: MarginalPair,
    cfg: SinkhornConfig = SinkhornConfig(),
    bridge: Optional[BridgeConditional] = None,
) -> OracleSolution:
    bridge = bridge_conditional(q) if bridge is None else bridge
    static = solve_static(endpoint_coupling(q), marginals, cfg)
    return OracleSolution(static.coupling, lift_static(static.coupling, bridge), static.residual, static.iterations)


# -- independent oracles ----------------------------------------------------


def _fit_endpoints(p: np.ndarray, mu: np.ndarray, nu: np.ndarray, tol: float, max_iter: int) -> np.ndarray:
    """I-projection of a full tensor onto fixed endpoint marginals by alternate rescaling."""
    nd = p.ndim
    head = (slice(None),) + (None,) * (nd - 1)
    tail = (None,) * (nd - 1) + (slice(None),)
    for _ in range(max_iter):
        p = p * (mu / p.sum(axis=tuple(range(1, nd))))[head]
        p = p * (nu / p.sum(axis=tuple(range(nd - 1))))[tail]
        err = float(np.max(np.abs(p.sum(axis=tuple(range(1, nd))) - mu)))
        if err <= tol:
            return p
    raise NonConvergenceError("endpoint fitting did not converge", err)


def brute_force_opt(
    q: JointDistribution,
    marginals: MarginalPair,
    step: float = 0.5,
    stationarity: float = 1e-10,
    max_iterations: int = 10_000,
) -> JointDistribution:
    """Minimize KL(p || q) over trajectory laws with endpoint marginals (mu, nu).

    Entropic mirror descent on the full tensor: multiplicative step
    p <- p * exp(-step * grad) followed by the KL projection onto the
    endpoint constraints. Stops when the gradient ln(p/q) + 1 has no component
    left in the tangent space of the constraint set (zero endpoint marginals).
    """
    from .theory import SubspaceId, build_constraint_operator, norm, project_onto_subspace

    space = q.space
    if space.cardinality > 3 or space.interior_count > 2:
        raise DomainError("brute_force_opt is limited to |X| <= 3, N <= 2")
    op = build_constraint_operator(space, SubspaceId.LC)
    qv = q.values
    mu, nu = marginals.mu, marginals.nu
    p = _fit_endpoints(qv.copy(), mu, nu, 1e-15, 100_000)
    residual = np.inf
    for _ in range(max_iterations):
        grad = np.log(p / qv) + 1.0
        residual = norm(project_onto_subspace(grad, op))
        if residual <= stationarity:
            return JointDistribution.normalized(p)
        p = p * np.exp(-step * grad)
        p = _fit_endpoints(p / p.sum(), mu, nu, 1e-15, 100_000)
    raise NonConvergenceError("mirror descent did not reach stationarity", residual)


def golden_section_static_2x2(q01, marginals: MarginalPair, digits: int = 40, xtol: float = 1e-20) -> np.ndarray:
    """KL projection of a 2x2 q01 onto Pi(mu, nu) by golden-section search.

    Couplings with fixed 2x2 marginals form the one-parameter family
    [[a, mu1 - a], [nu1 - a, 1 - mu1 - nu1 + a]]. The objective is evaluated
    in extended precision so the minimizer is resolved well below double
    precision spacing.
    """
    q01 = np.asarray(q01, dtype=np.float64)
    if q01.shape != (2, 2):
        raise DomainError("golden-section oracle needs a 2x2 reference coupling")
    with mpmath.workdps(digits):
        mu1, nu1 = mpmath.mpf(marginals.mu[0]), mpmath.mpf(marginals.nu[0])
        q = [[mpmath.mpf(x) for x in row] for row in q01]

        def cells(a):
            return [[a, mu1 - a], [nu1 - a, 1 - mu1 - nu1 + a]]

        def objective(a):
            c = cells(a)
            return mpmath.fsum(
                c[i][j] * mpmath.log(c[i][j] / q[i][j]) for i in range(2) for j in range(2) if c[i][j] > 0
            )

        lo = max(mpmath.mpf(0), mu1 + nu1 - 1)
        hi = min(mu1, nu1)
        invphi = (mpmath.sqrt(5) - 1) / 2
        x1 = hi - invphi * (hi - lo)
        x2 = lo + invphi * (hi - lo)
        f1, f2 = objective(x1), objective(x2)
        while hi - lo > xtol:
            if f1 < f2:
                hi, x2, f2 = x2, x1, f1
                x1 = hi - invphi * (hi - lo)
                f1 = objective(x1)
            else:
                lo, x1, f1 = x1, x2, f2
                x2 = lo + invphi * (hi - lo)
                f2 = objective(x2)
        a = (lo + hi) / 2
        return np.array([[float(x) for x in row] for row in cells(a)])


def kl_gap(a, b) -> float:
    """Symmetric disagreement max(KL(a||b), KL(b||a)) between two solutions."""
    return max(kl_divergence(values_of(a), values_of(b)), kl_divergence(values_of(b), values_of(a)))
