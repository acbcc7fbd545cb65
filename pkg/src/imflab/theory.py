"""Rate constants, marginal-constraint subspaces and inequality certificates.

Three subspaces of signed measures on X^(N+2) matter here:

* ``LA``: every consecutive-pair marginal xi(x_{t_n}, x_{t_{n+1}}) vanishes,
* ``LB``: the endpoint-pair marginal xi(x_0, x_1) vanishes,
* ``LC``: both single endpoint marginals xi(x_0) and xi(x_1) vanish.

Each is the null space of a matrix of marginal-cell functionals; orthogonal
projection uses the pseudo-inverse of that matrix's Gram matrix.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Optional

import mpmath
import numpy as np

from .process import BridgeConditional, MarginalPair
from .tensor import (
    DomainError,
    JointDistribution,
    SignedMeasure,
    StateSpace,
    Tensor,
    kl_divergence,
    norm,
    norm_sq,
    values_of,
)

DEFAULT_TOL = 1e-10
PSEUDO_INVERSE_CUTOFF = 1e-10


# -- constants --------------------------------------------------------------


@dataclass(frozen=True)
class RateConstants:
    eps_q: float
    eps_mu: float
    eps_nu: float
    delta: float
    m: float
    interior_count: int

    @property
    def rate(self) -> float:
        """m^3 / 4, the guaranteed fractional decrease per iteration."""
        return self.m**3 / 4.0

    @property
    def contraction(self) -> float:
        # rounds to exactly 1.0 once m^3/4 < 2^-53; use bound_factor for powers
        return 1.0 - self.rate

    @property
    def m_direct(self) -> float:
        return self.eps_q ** (self.interior_count + 2) * self.eps_mu * self.eps_nu

    def bound_factor(self, k: int) -> float:
        """(1 - m^3/4)^(k-1) evaluated without cancellation."""
        if k < 1:
            raise DomainError("bound defined for k >= 1")
        return math.exp((k - 1) * math.log1p(-self.rate))

    def as_dict(self) -> dict:
        return {
            "eps_q": self.eps_q,
            "eps_mu": self.eps_mu,
            "eps_nu": self.eps_nu,
            "delta": self.delta,
            "m": self.m,
            "contraction": self.contraction,
            "rate": self.rate,
        }


def compute_constants(bridge: BridgeConditional, marginals: MarginalPair) -> RateConstants:
    n = bridge.space.interior_count
    eps_q = bridge.min_entry()
    eps_mu = float(marginals.mu.min())
    eps_nu = float(marginals.nu.min())
    delta = eps_q ** (n + 1) * eps_mu * eps_nu
    return RateConstants(eps_q, eps_mu, eps_nu, delta, eps_q * delta, n)


# -- constraint operators ---------------------------------------------------


class SubspaceId(str, enum.Enum):
    LA = "LA"
    LB = "LB"
    LC = "LC"


@dataclass(frozen=True, eq=False)
class ConstraintOperator:
    """Rows are marginal-cell sums; the subspace is the matrix's null space."""

    space: StateSpace
    subspace: SubspaceId
    matrix: np.ndarray
    rank: int
    gram_pinv: np.ndarray = field(repr=False)

    def apply(self, xi: Tensor) -> np.ndarray:
        return self.matrix @ values_of(xi).ravel()

    def residual(self, xi: Tensor) -> float:
        """Largest absolute marginal-cell value of xi; zero iff xi lies in the subspace."""
        r = self.apply(xi)
        return float(np.max(np.abs(r))) if r.size else 0.0

    @property
    def dimension(self) -> int:
        return self.space.size - self.rank

    def null_basis(self) -> np.ndarray:
        """Orthonormal basis of the subspace, one column per direction."""
        _, s, vt = np.linalg.svd(self.matrix, full_matrices=True)
        return vt[self.rank :].T

    def project(self, xi: Tensor) -> SignedMeasure:
        return project_onto_subspace(xi, self)


def _pair_rows(space: StateSpace, a: int, b: int) -> np.ndarray:
    """Indicator rows for the (x_{t_a}, x_{t_b}) marginal, cell (i, j) at row i*K + j."""
    k = space.cardinality
    grid = np.indices(space.shape).reshape(space.n_times, -1)
    row = grid[a] * k + grid[b]
    rows = np.zeros((k * k, space.size))
    rows[row, np.arange(space.size)] = 1.0
    return rows


def _single_rows(space: StateSpace, a: int) -> np.ndarray:
    grid = np.indices(space.shape).reshape(space.n_times, -1)
    rows = np.zeros((space.cardinality, space.size))
    rows[grid[a], np.arange(space.size)] = 1.0
    return rows


@lru_cache(maxsize=32)
def build_constraint_operator(space: StateSpace, subspace: SubspaceId | str) -> ConstraintOperator:
    subspace = SubspaceId(subspace)
    if subspace is SubspaceId.LA:
        mat = np.vstack([_pair_rows(space, n, n + 1) for n in range(space.interior_count + 1)])
    elif subspace is SubspaceId.LB:
        mat = _pair_rows(space, 0, space.last)
    else:
        mat = np.vstack([_single_rows(space, 0), _single_rows(space, space.last)])
    gram = mat @ mat.T
    w, u = np.linalg.eigh(gram)
    keep = w > PSEUDO_INVERSE_CUTOFF * w.max()
    pinv = (u[:, keep] / w[keep]) @ u[:, keep].T
    mat.setflags(write=False)
    pinv.setflags(write=False)
    return ConstraintOperator(space, subspace, mat, int(keep.sum()), pinv)


def project_onto_subspace(xi: Tensor, op: ConstraintOperator) -> SignedMeasure:
    """Orthogonal projection xi - C^T (C C^T)^+ C xi."""
    v = values_of(xi)
    if v.shape != op.space.shape:
        raise DomainError(f"shape {v.shape} does not match operator space {op.space.shape}")
    flat = v.ravel()
    out = flat - op.matrix.T @ (op.gram_pinv @ (op.matrix @ flat))
    return SignedMeasure(op.space, out.reshape(v.shape))


def operators(space: StateSpace) -> dict[SubspaceId, ConstraintOperator]:
    return {s: build_constraint_operator(space, s) for s in SubspaceId}


# -- certificates -----------------------------------------------------------


@dataclass
class Check:
    name: str
    lhs: float
    rhs: float
    slack: float
    tolerance: float
    passed: bool = field(init=False)
    count: int = 1

    def __post_init__(self):
        self.passed = bool(self.slack >= -self.tolerance)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "lhs": self.lhs,
            "rhs": self.rhs,
            "slack": self.slack,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "count": self.count,
        }


def inequality(name: str, lhs: float, rhs: float, tol: float, count: int = 1) -> Check:
    """Check for lhs >= rhs."""
    return Check(name, float(lhs), float(rhs), float(lhs - rhs), tol, count=count)


def upper_bound(name: str, value: float, bound: float, tol: float, count: int = 1) -> Check:
    """Check for value <= bound."""
    return Check(name, float(value), float(bound), float(bound - value), tol, count=count)


@dataclass
class CertificateReport:
    name: str
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def min_slack(self) -> float:
        return min((c.slack for c in self.checks), default=math.inf)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    def worst(self, name: str) -> Optional[Check]:
        named = [c for c in self.checks if c.name == name]
        return min(named, key=lambda c: c.slack) if named else None

    def summarize(self) -> "CertificateReport":
        """Collapse repeated checks to the worst instance per name."""
        out = CertificateReport(self.name, notes=list(self.notes))
        for name in dict.fromkeys(c.name for c in self.checks):
            named = [c for c in self.checks if c.name == name]
            worst = min(named, key=lambda c: c.slack)
            out.checks.append(
                Check(worst.name, worst.lhs, worst.rhs, worst.slack, worst.tolerance, count=sum(c.count for c in named))
            )
        return out

    def extend(self, other: "CertificateReport") -> None:
        self.checks.extend(other.checks)
        self.notes.extend(other.notes)

    def as_dict(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "min_slack": self.min_slack if self.checks else None,
            "checks": [c.as_dict() for c in self.checks],
            "notes": list(self.notes),
        }


def check_subspace_structure(
    xi_c: Tensor, ops: dict[SubspaceId, ConstraintOperator], tol: float = DEFAULT_TOL
) -> list[Check]:
    """For xi in LC: Pr_LB(xi) lies in LC, and xi - Pr_LB(xi) lies in LA."""
    in_b = project_onto_subspace(xi_c, ops[SubspaceId.LB])
    rest = values_of(xi_c) - in_b.values
    return [
        upper_bound("LB_subset_LC", ops[SubspaceId.LC].residual(in_b), 0.0, tol),
        upper_bound("LC_minus_LB_subset_LA", ops[SubspaceId.LA].residual(rest), 0.0, tol),
    ]


def lemma3_check(xi: Tensor, ops: dict[SubspaceId, ConstraintOperator], tol: float = DEFAULT_TOL) -> Check:
    """||Pr_LA xi||^2 + ||Pr_LB xi||^2 >= ||xi||^2 for xi already in LC."""
    lhs = norm_sq(project_onto_subspace(xi, ops[SubspaceId.LA])) + norm_sq(
        project_onto_subspace(xi, ops[SubspaceId.LB])
    )
    return inequality("lemma3", lhs, norm_sq(xi), tol)


def check_lemma3(space: StateSpace, trials: int, seed: int, tol: float = DEFAULT_TOL) -> CertificateReport:
    """Gaussian signed measures projected onto LC, then the lemma and the subspace inclusions."""
    report = CertificateReport("lemma3")
    if trials <= 0:
        report.notes.append("no trials requested; vacuous pass")
        return report
    ops = operators(space)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        xi = project_onto_subspace(rng.standard_normal(space.shape), ops[SubspaceId.LC])
        report.add(lemma3_check(xi, ops, tol))
        for c in check_subspace_structure(xi, ops, tol):
            report.add(c)
    return report.summarize()


# -- KL gradient ------------------------------------------------------------


def kl_gradient(p: Tensor, opt: Tensor) -> SignedMeasure:
    """Cellwise ln(p / opt) + 1, the gradient of p -> sum p ln(p / opt)."""
    pv, ov = values_of(p), values_of(opt)
    if pv.shape != ov.shape:
        raise DomainError(f"shape mismatch {pv.shape} vs {ov.shape}")
    if np.any(pv <= 0):
        raise DomainError("gradient undefined at a zero cell of p; start diagnostics at k = 1")
    if np.any(ov <= 0):
        raise DomainError("gradient undefined where the optimum has zero mass")
    return SignedMeasure.from_array(np.log(pv / ov) + 1.0)


def projected_gradient(p: Tensor, opt: Tensor, op: ConstraintOperator) -> SignedMeasure:
    return project_onto_subspace(kl_gradient(p, opt), op)


def gradient_norms(p: Tensor, opt: Tensor, ops: dict[SubspaceId, ConstraintOperator]) -> dict[SubspaceId, float]:
    g = kl_gradient(p, opt)
    return {s: norm(project_onto_subspace(g, op)) for s, op in ops.items()}


# -- iteration inequalities --------------------------------------------------


def check_lemma4(
    p_k: JointDistribution,
    p_half: JointDistribution,
    p_next: JointDistribution,
    opt: JointDistribution,
    constants: RateConstants,
    ops: Optional[dict] = None,
    tol: float = DEFAULT_TOL,
) -> CertificateReport:
    """Per-iteration decrease and its two half-step inequalities."""
    ops = ops or operators(p_k.space)
    m = constants.m
    f_k, f_half, f_next = kl_divergence(p_k, opt), kl_divergence(p_half, opt), kl_divergence(p_next, opt)
    g_k = kl_gradient(p_k, opt)
    g_half = kl_gradient(p_half, opt)
    ga = norm_sq(project_onto_subspace(g_k, ops[SubspaceId.LA]))
    gb_half = norm_sq(project_onto_subspace(g_half, ops[SubspaceId.LB]))
    gc = norm_sq(project_onto_subspace(g_k, ops[SubspaceId.LC]))
    report = CertificateReport("lemma4")
    report.add(inequality("markov_halfstep", f_k - f_half, m / 2 * ga, tol))
    report.add(inequality("reciprocal_halfstep", f_half - f_next, m / 2 * gb_half, tol))
    report.add(inequality("lemma4", f_k - f_next, constants.rate * gc, tol))
    return report


def pl_check(p: Tensor, opt: Tensor, op_c: ConstraintOperator, tol: float = DEFAULT_TOL) -> Check:
    """||grad_LC f(p)||^2 >= f(p)."""
    g = norm_sq(projected_gradient(p, opt, op_c))
    return inequality("pl", g, kl_divergence(p, opt), tol)


def strong_convexity_check(p: Tensor, opt: Tensor, op_c: ConstraintOperator, tol: float = DEFAULT_TOL) -> Check:
    """||grad_LC f(p)|| >= ||p - opt||."""
    g = norm(projected_gradient(p, opt, op_c))
    return inequality("gradient_dominates_distance", g, norm(values_of(p) - values_of(opt)), tol)


def check_theorem1(trace, constants: RateConstants, tol: float = DEFAULT_TOL, bound_tol: float = 1e-12) -> CertificateReport:
    """Rate bound, PL inequality and the first-step decrease along a recorded trace.

    ``trace`` is an :class:`imflab.imf.IterationTrace`; PL slacks are read
    from its integer rows when gradients were recorded.
    """
    report = CertificateReport("theorem1")
    kl0 = trace.kl0
    for prev, row in zip(trace.rows, trace.rows[1:]):
        report.add(upper_bound("monotone", row.kl_to_opt, prev.kl_to_opt, bound_tol))
    for row in trace.integer_rows():
        if row.k < 1:
            continue
        report.add(upper_bound("rate_bound", row.kl_to_opt, constants.bound_factor(int(row.k)) * kl0, bound_tol))
        if not math.isnan(row.pl_slack):
            report.add(Check("pl", row.pl_lhs, row.kl_to_opt, row.pl_slack, tol))
        if not math.isnan(row.distance_slack):
            report.add(Check("gradient_dominates_distance", row.grad_LC, row.grad_LC - row.distance_slack, row.distance_slack, tol))
        if row.k == 1:
            report.add(upper_bound("first_step", row.kl_to_opt, kl0, bound_tol))
    if not report.checks:
        report.notes.append("trace has no iterates with k >= 1")
    return report.summarize()


def check_convexity_spectrum(p: Tensor, constants: RateConstants, tol: float = 1e-13) -> CertificateReport:
    """Hessian diag(1/p) has entries in [1, 1/m]: min cell >= m and max cell <= 1."""
    v = values_of(p)
    report = CertificateReport("spectrum")
    report.add(inequality("min_mass", v.min(), constants.m, tol))
    report.add(upper_bound("max_mass", v.max(), 1.0, tol))
    return report


def finite_difference_check(
    p: JointDistribution,
    opt: JointDistribution,
    directions: Iterable[np.ndarray],
    step: float = 1e-6,
    rtol: float = 1e-6,
    digits: int = 40,
) -> CertificateReport:
    """Central differences of sum p ln(p/opt) against <gradient, direction>.

    Differences are taken in extended precision. The step is ``step`` unless
    some cell of p is smaller than step * |d|, in which case it shrinks in
    proportion so both evaluation points stay positive.
    """
    g = kl_gradient(p, opt).values
    report = CertificateReport("gradients")
    with mpmath.workdps(digits):
        pv = [mpmath.mpf(x) for x in p.values.ravel()]
        ov = [mpmath.mpf(x) for x in values_of(opt).ravel()]

        def f(h, d):
            return mpmath.fsum(a * mpmath.log(a / b) for a, b in ((x + h * y, o) for x, y, o in zip(pv, d, ov)))

        for d in directions:
            d = np.asarray(d, dtype=np.float64)
            d = d / np.linalg.norm(d)
            nz = d != 0
            h = step * min(1.0, float(np.min(p.values[nz] / np.abs(d[nz]))))
            dm = [mpmath.mpf(x) for x in d.ravel()]
            hm = mpmath.mpf(h)
            fd = float((f(hm, dm) - f(-hm, dm)) / (2 * hm))
            exact = float(np.dot(g.ravel(), d.ravel()))
            rel = abs(fd - exact) / abs(exact) if exact != 0 else abs(fd)
            report.add(upper_bound("finite_difference", rel, 0.0, rtol))
    return report.summarize()


def check_operator_algebra(
    space: StateSpace, trials: int, seed: int, tol: float = DEFAULT_TOL
) -> CertificateReport:
    """Idempotence and self-adjointness of the three orthogonal projections."""
    rng = np.random.default_rng(seed)
    report = CertificateReport("projections")
    for sub, op in operators(space).items():
        for _ in range(trials):
            xi, zeta = rng.standard_normal(space.shape), rng.standard_normal(space.shape)
            pxi = project_onto_subspace(xi, op)
            twice = project_onto_subspace(pxi, op)
            report.add(upper_bound(f"idempotent_{sub.value}", float(np.max(np.abs(twice.values - pxi.values))), 0.0, tol))
            pzeta = project_onto_subspace(zeta, op)
            gap = abs(float(np.vdot(pxi.values, zeta)) - float(np.vdot(xi, pzeta.values)))
            report.add(upper_bound(f"self_adjoint_{sub.value}", gap, 0.0, tol))
            report.add(upper_bound(f"in_subspace_{sub.value}", op.residual(pxi), 0.0, tol))
    return report.summarize()
