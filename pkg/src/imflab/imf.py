"""Iterative Markovian Fitting: alternating Markov and reciprocal projections."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .process import BridgeConditional, MarginalPair, endpoint_coupling, lift
from .tensor import (
    PROB_TOL,
    DomainError,
    JointDistribution,
    SingularConditioningError,
    kl_divergence,
    marginal,
)
from .theory import (
    DEFAULT_TOL,
    CertificateReport,
    ConstraintOperator,
    RateConstants,
    SubspaceId,
    check_lemma4,
    inequality,
    kl_gradient,
    norm,
    norm_sq,
    operators,
    project_onto_subspace,
)

log = logging.getLogger(__name__)

NAN = float("nan")


def markov_projection(p: JointDistribution) -> JointDistribution:
    """p(x_0) * prod_n p(x_{t_{n+1}} | x_{t_n}), built from consecutive-pair marginals."""
    v = p.values
    k, n_steps = p.space.cardinality, p.space.interior_count + 1
    out = None
    for n in range(n_steps):
        pair = marginal(v, (n, n + 1))
        if out is None:
            out = pair
            continue
        mass = pair.sum(axis=1)
        if np.any(mass <= 0):
            x = int(np.flatnonzero(mass <= 0)[0])
            raise SingularConditioningError(f"zero mass at time index {n}, state {x + 1}", (n, x + 1))
        trans = pair / mass[:, None]
        out = out[..., None] * trans.reshape((1,) * (out.ndim - 1) + (k, k))
    return JointDistribution.normalized(out)


def reciprocal_projection(p: JointDistribution, bridge: BridgeConditional) -> JointDistribution:
    """Keep p's endpoint coupling and replace its interior law by the bridge."""
    if p.space != bridge.space:
        raise DomainError(f"space mismatch: {p.space} vs {bridge.space}")
    return JointDistribution.normalized(lift(bridge, endpoint_coupling(p)))


@dataclass(frozen=True)
class ImfConfig:
    max_iterations: int = 100
    stop_kl: float = 1e-14
    record_gradients: bool = True
    keep_iterates: bool = False
    tolerance: float = DEFAULT_TOL

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.stop_kl < 0:
            raise ValueError("stop_kl must be nonnegative")


@dataclass
class TraceRow:
    k: float
    kl_to_opt: float
    kl_decrement: float = NAN
    min_mass: float = NAN
    drift: float = 0.0
    marginal_error: float = 0.0
    bound_value: float = NAN
    grad_LA: float = NAN
    grad_LB: float = NAN
    grad_LC: float = NAN
    lemma4_slack: float = NAN
    markov_halfstep_slack: float = NAN
    reciprocal_halfstep_slack: float = NAN
    pl_lhs: float = NAN
    pl_slack: float = NAN
    distance_slack: float = NAN

    @property
    def is_integer(self) -> bool:
        return float(self.k).is_integer()


TABLE_COLUMNS = (
    "k",
    "kl_to_opt",
    "bound_value",
    "min_mass",
    "grad_LA",
    "grad_LB",
    "grad_LC",
    "lemma4_slack",
    "pl_slack",
)


@dataclass
class IterationTrace:
    rows: list = field(default_factory=list)
    iterates: list = field(default_factory=list)
    lemma4: CertificateReport = field(default_factory=lambda: CertificateReport("lemma4"))
    final: Optional[JointDistribution] = None

    @property
    def kl0(self) -> float:
        return self.rows[0].kl_to_opt

    @property
    def kl_sequence(self) -> np.ndarray:
        return np.array([r.kl_to_opt for r in self.rows])

    def integer_rows(self) -> list:
        return [r for r in self.rows if r.is_integer]

    def row(self, k: float) -> TraceRow:
        for r in self.rows:
            if r.k == k:
                return r
        raise KeyError(k)

    @property
    def iterations(self) -> int:
        return int(self.rows[-1].k)


def _gradient_diagnostics(row: TraceRow, p: JointDistribution, opt: JointDistribution, ops, tol: float) -> None:
    g = kl_gradient(p, opt)
    proj = {s: project_onto_subspace(g, op) for s, op in ops.items()}
    row.grad_LA = norm(proj[SubspaceId.LA])
    row.grad_LB = norm(proj[SubspaceId.LB])
    row.grad_LC = norm(proj[SubspaceId.LC])
    row.pl_lhs = norm_sq(proj[SubspaceId.LC])
    row.pl_slack = row.pl_lhs - row.kl_to_opt
    row.distance_slack = row.grad_LC - norm(p.values - opt.values)


def run_imf(
    p0: JointDistribution,
    bridge: BridgeConditional,
    opt: JointDistribution,
    cfg: ImfConfig = ImfConfig(),
    constants: Optional[RateConstants] = None,
    marginals: Optional[MarginalPair] = None,
) -> IterationTrace:
    """Alternate Markov and reciprocal projections from p0, tracking KL to opt.

    Rows are stored per half-step (k = 0, 0.5, 1, ...). Gradient norms,
    the rate bound and the per-iteration inequality slacks are filled on
    integer rows k >= 1 when ``cfg.record_gradients`` is set and
    ``constants`` are given.
    """
    ops = operators(p0.space) if cfg.record_gradients else None
    trace = IterationTrace()
    if marginals is None:
        marginals = MarginalPair(marginal(p0.values, (0,)), marginal(p0.values, (p0.space.last,)))

    def make_row(k: float, p: JointDistribution, prev: Optional[TraceRow]) -> TraceRow:
        kl = kl_divergence(p, opt)
        row = TraceRow(k=k, kl_to_opt=kl, min_mass=p.min_mass(), drift=p.drift)
        row.kl_decrement = NAN if prev is None else prev.kl_to_opt - kl
        row.marginal_error = max(
            float(np.max(np.abs(marginal(p.values, (0,)) - marginals.mu))),
            float(np.max(np.abs(marginal(p.values, (p.space.last,)) - marginals.nu))),
        )
        if row.is_integer and k >= 1:
            if constants is not None:
                row.bound_value = constants.bound_factor(int(k)) * trace.kl0
            if ops is not None:
                _gradient_diagnostics(row, p, opt, ops, cfg.tolerance)
        if abs(p.drift) > PROB_TOL:
            log.warning("k=%s: normalization drift %.3e", k, p.drift)
        return row

    p = p0
    row = make_row(0.0, p, None)
    trace.rows.append(row)
    if cfg.keep_iterates:
        trace.iterates.append(p)
    for it in range(cfg.max_iterations):
        if row.kl_to_opt < cfg.stop_kl:
            break
        half = markov_projection(p)
        half_row = make_row(it + 0.5, half, row)
        nxt = reciprocal_projection(half, bridge)
        next_row = make_row(it + 1.0, nxt, half_row)
        if it >= 1 and ops is not None and constants is not None:
            rep = check_lemma4(p, half, nxt, opt, constants, ops, cfg.tolerance)
            trace.lemma4.extend(rep)
            by_name = {c.name: c.slack for c in rep.checks}
            row.lemma4_slack = by_name["lemma4"]
            row.markov_halfstep_slack = by_name["markov_halfstep"]
            row.reciprocal_halfstep_slack = by_name["reciprocal_halfstep"]
        trace.rows.extend([half_row, next_row])
        if cfg.keep_iterates:
            trace.iterates.extend([half, nxt])
        p, row = nxt, next_row
    trace.final = p
    return trace


# -- feasible perturbations and the argmin property -------------------------


def sample_perturbations(
    center: JointDistribution,
    op: ConstraintOperator,
    floor: float,
    count: int,
    rng: np.random.Generator,
) -> list:
    """Random points center + t*d with d in op's subspace, kept >= floor entrywise.

    Every sample shares center's marginals for op's functionals, so it stays
    in the same affine constraint set.
    """
    c = center.values
    if c.min() <= floor:
        raise DomainError(f"center min mass {c.min():.3e} not above floor {floor:.3e}")
    out = []
    for _ in range(count):
        d = project_onto_subspace(rng.standard_normal(c.shape), op).values
        neg = d < 0
        if not np.any(neg):
            continue
        t_max = float(np.min((c[neg] - floor) / -d[neg]))
        t = t_max * rng.uniform(0.0, 1.0)
        vals = np.maximum(c + t * d, 0.0)
        out.append(JointDistribution(center.space, vals, tol=1e-9))
    return out


def check_lemma1(
    p_k: JointDistribution,
    p_half: JointDistribution,
    p_next: JointDistribution,
    opt: JointDistribution,
    floor: float,
    count: int,
    rng: np.random.Generator,
    tol: float = 1e-12,
    pythagoras_tol: float = 1e-10,
) -> CertificateReport:
    """Each half-step minimizes KL(. || opt) over its affine constraint set.

    Markov: over A(p_k), points sharing p_k's consecutive-pair marginals.
    Reciprocal: over B(p_half), points sharing p_half's endpoint coupling.
    Also checks that KL(p'||opt) - KL(p'||p_half) is constant on A(p_k).
    """
    ops = operators(p_k.space)
    report = CertificateReport("lemma1")
    f_half = kl_divergence(p_half, opt)
    f_next = kl_divergence(p_next, opt)
    a_points = sample_perturbations(p_half, ops[SubspaceId.LA], floor, count, rng)
    offsets = []
    for q in [p_k] + a_points:
        report.add(inequality("markov_argmin", kl_divergence(q, opt), f_half, tol))
        if q.min_mass() > 0:
            offsets.append(kl_divergence(q, opt) - kl_divergence(q, p_half))
    if offsets:
        spread = max(offsets) - min(offsets)
        report.add(inequality("pythagorean_constant", -spread, 0.0, pythagoras_tol))
    for q in [p_half] + sample_perturbations(p_next, ops[SubspaceId.LB], floor, count, rng):
        report.add(inequality("reciprocal_argmin", kl_divergence(q, opt), f_next, tol))
    return report.summarize()
