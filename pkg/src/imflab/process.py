"""Reference processes, endpoint couplings and the bridge conditional."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .tensor import (
    PROB_TOL,
    DomainError,
    JointDistribution,
    SingularConditioningError,
    StateSpace,
    ValidationError,
    marginal,
)


def _prob_vector(name: str, v, positive: bool = True) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValidationError(f"{name} must be a vector, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise ValidationError(f"{name} has non-finite entries")
    bad = np.flatnonzero(v <= 0) if positive else np.flatnonzero(v < 0)
    if bad.size:
        raise ValidationError(f"{name}[{bad[0] + 1}] = {v[bad[0]]!r} is not strictly positive")
    if abs(v.sum() - 1.0) > PROB_TOL:
        raise ValidationError(f"{name} sums to {v.sum()!r}, not 1")
    return v


@dataclass(frozen=True, eq=False)
class MarginalPair:
    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        mu = _prob_vector("mu", self.mu)
        nu = _prob_vector("nu", self.nu)
        if mu.shape != nu.shape:
            raise ValidationError(f"mu and nu have different sizes {mu.size} and {nu.size}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)


@dataclass(frozen=True, eq=False)
class MarkovSpec:
    """Initial law of x_0 and the N+1 transition matrices t_n -> t_{n+1}."""

    space: StateSpace
    initial: np.ndarray
    transitions: tuple

    def __post_init__(self):
        k = self.space.cardinality
        initial = _prob_vector("initial", self.initial)
        if initial.size != k:
            raise ValidationError(f"initial has {initial.size} entries, expected {k}")
        mats = tuple(np.asarray(t, dtype=np.float64) for t in self.transitions)
        if len(mats) != self.space.interior_count + 1:
            raise ValidationError(
                f"expected {self.space.interior_count + 1} transition matrices, got {len(mats)}"
            )
        for n, t in enumerate(mats):
            if t.shape != (k, k):
                raise ValidationError(f"transition {n} has shape {t.shape}, expected {(k, k)}")
            bad = np.argwhere(~(t > 0))
            if bad.size:
                i, j = bad[0]
                raise ValidationError(
                    f"transition {n} entry ({i + 1},{j + 1}) = {t[i, j]!r} is not strictly positive"
                )
            rows = t.sum(axis=1)
            off = np.flatnonzero(np.abs(rows - 1.0) > PROB_TOL)
            if off.size:
                raise ValidationError(f"transition {n} row {off[0] + 1} sums to {rows[off[0]]!r}")
        object.__setattr__(self, "initial", initial)
        object.__setattr__(self, "transitions", mats)


@dataclass(frozen=True, eq=False)
class Coupling:
    """Joint law of (x_0, x_1) with marginals mu (rows) and nu (columns)."""

    matrix: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.matrix, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValidationError(f"coupling must be square, got shape {c.shape}")
        if np.any(c < 0) or not np.all(np.isfinite(c)):
            raise ValidationError("coupling has negative or non-finite entries")
        mu = np.asarray(self.mu, dtype=np.float64)
        nu = np.asarray(self.nu, dtype=np.float64)
        row_err = np.max(np.abs(c.sum(axis=1) - mu))
        col_err = np.max(np.abs(c.sum(axis=0) - nu))
        if row_err > PROB_TOL or col_err > PROB_TOL:
            raise ValidationError(
                f"coupling marginals off by {row_err:.3e} (rows) and {col_err:.3e} (columns)"
            )
        object.__setattr__(self, "matrix", c)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "nu", nu)

    @classmethod
    def from_matrix(cls, matrix) -> "Coupling":
        c = np.asarray(matrix, dtype=np.float64)
        return cls(c, c.sum(axis=1), c.sum(axis=0))


@dataclass(frozen=True, eq=False)
class BridgeConditional:
    """``table[x_0, x_1, x_{t_1}, ..., x_{t_N}] = q(x_{t_1:t_N} | x_0, x_1)``."""

    space: StateSpace
    table: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.table, dtype=np.float64)
        if t.shape != self.space.shape:
            raise DomainError(f"bridge table shape {t.shape} does not match {self.space.shape}")
        if not np.all(t > 0):
            raise ValidationError("bridge conditional must be strictly positive")
        sums = t.reshape(self.space.cardinality**2, -1).sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > PROB_TOL:
            raise ValidationError("bridge conditional slices do not sum to 1")
        object.__setattr__(self, "table", t)

    def min_entry(self) -> float:
        return float(self.table.min())


def build_markov_joint(spec: MarkovSpec) -> JointDistribution:
    """Trajectory law initial(x_0) * prod_n T_n(x_{t_n}, x_{t_{n+1}})."""
    k = spec.space.cardinality
    joint = spec.initial.copy()
    for t in spec.transitions:
        joint = joint[..., None] * t.reshape((1,) * (joint.ndim - 1) + (k, k))
    return JointDistribution(spec.space, joint)


def endpoint_coupling(p) -> np.ndarray:
    """Matrix of p(x_0, x_1)."""
    v = getattr(p, "values", p)
    return marginal(v, (0, v.ndim - 1))


def bridge_conditional(q: JointDistribution) -> BridgeConditional:
    v = q.values
    ends = endpoint_coupling(v)
    if np.any(ends <= 0):
        i, j = np.argwhere(ends <= 0)[0]
        raise SingularConditioningError(
            f"zero endpoint mass at (x_0, x_1) = ({i + 1}, {j + 1})", (int(i) + 1, int(j) + 1)
        )
    moved = np.moveaxis(v, -1, 1)
    table = moved / ends.reshape(ends.shape + (1,) * (v.ndim - 2))
    return BridgeConditional(q.space, table)


def lift(bridge: BridgeConditional, coupling_matrix) -> np.ndarray:
    """bridge(x_0, x_1, path) * c(x_0, x_1), arranged as a trajectory tensor."""
    c = np.asarray(coupling_matrix, dtype=np.float64)
    k = bridge.space.cardinality
    if c.shape != (k, k):
        raise DomainError(f"coupling shape {c.shape} does not match cardinality {k}")
    prod = bridge.table * c.reshape((k, k) + (1,) * bridge.space.interior_count)
    return np.moveaxis(prod, 1, -1)


def independent_coupling(m: MarginalPair) -> Coupling:
    return Coupling(np.outer(m.mu, m.nu), m.mu, m.nu)


def init_p0(bridge: BridgeConditional, eta: Coupling, marginals: Optional[MarginalPair] = None) -> JointDistribution:
    """IMF starting point q(x_{t_1:t_N} | x_0, x_1) * eta(x_0, x_1)."""
    if marginals is not None:
        err = max(np.max(np.abs(eta.mu - marginals.mu)), np.max(np.abs(eta.nu - marginals.nu)))
        if err > PROB_TOL:
            raise ValidationError(f"coupling marginals differ from (mu, nu) by {err:.3e}")
    return JointDistribution(bridge.space, lift(bridge, eta.matrix))


# -- random instances -------------------------------------------------------


@dataclass(frozen=True)
class GeneratorSpec:
    cardinality: int
    interior_count: int
    seed: int
    dirichlet_concentration: float = 1.0
    eps_floor: float = 1e-3


@dataclass(frozen=True, eq=False)
class Instance:
    spec: MarkovSpec
    marginals: MarginalPair
    coupling: Coupling

    @property
    def space(self) -> StateSpace:
        return self.spec.space


def floored_dirichlet(rng: np.random.Generator, k: int, concentration: float, floor: float, size=None) -> np.ndarray:
    draw = rng.dirichlet(np.full(k, concentration), size=size)
    draw = np.maximum(draw, floor)
    return draw / draw.sum(axis=-1, keepdims=True)


def random_instance(gen: GeneratorSpec) -> Instance:
    """Seeded Markov reference process plus endpoint marginals.

    Draw order is fixed (initial, transitions, mu, nu) so a seed pins the
    whole instance.
    """
    space = StateSpace(gen.cardinality, gen.interior_count)
    rng = np.random.default_rng(gen.seed)
    k, a, f = gen.cardinality, gen.dirichlet_concentration, gen.eps_floor
    initial = floored_dirichlet(rng, k, a, f)
    transitions = tuple(floored_dirichlet(rng, k, a, f, size=k) for _ in range(space.interior_count + 1))
    mu = floored_dirichlet(rng, k, a, f)
    nu = floored_dirichlet(rng, k, a, f)
    marginals = MarginalPair(mu, nu)
    return Instance(MarkovSpec(space, initial, transitions), marginals, independent_coupling(marginals))


def explicit_instance(
    initial: Sequence[float],
    transitions: Sequence,
    mu: Sequence[float],
    nu: Sequence[float],
    coupling=None,
) -> Instance:
    transitions = tuple(np.asarray(t, dtype=np.float64) for t in transitions)
    space = StateSpace(len(initial), len(transitions) - 1)
    marginals = MarginalPair(mu, nu)
    eta = independent_coupling(marginals) if coupling is None else Coupling(coupling, marginals.mu, marginals.nu)
    return Instance(MarkovSpec(space, initial, transitions), marginals, eta)
