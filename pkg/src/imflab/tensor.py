"""Dense tensors over trajectory space X^(N+2).

A trajectory ``(x_{t_0}, ..., x_{t_{N+1}})`` is stored row-major with ``t_0``
as the most significant axis, so a tensor has shape ``(K,) * (N + 2)`` where
``K = |X|``. States are 1-based at the public boundary (``flat_index``) and
0-based everywhere else.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence, Union

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_BUDGET = 10**7
PROB_TOL = 1e-12


class DomainError(ValueError):
    """Invalid index, shape or argument."""


class ValidationError(ValueError):
    """Input fails a probabilistic invariant (mass, positivity, marginals)."""


class SingularConditioningError(ArithmeticError):
    """Conditioning on an event of zero mass."""

    def __init__(self, message: str, cell: tuple | None = None):
        super().__init__(message)
        self.cell = cell


class InfiniteDivergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class StateSpace:
    cardinality: int
    interior_count: int
    budget: int = DEFAULT_BUDGET

    def __post_init__(self):
        if int(self.cardinality) != self.cardinality or self.cardinality < 2:
            raise DomainError(f"cardinality must be an integer >= 2, got {self.cardinality}")
        if int(self.interior_count) != self.interior_count or self.interior_count < 1:
            raise DomainError(f"interior_count must be an integer >= 1, got {self.interior_count}")
        if self.size > self.budget:
            raise DomainError(
                f"tensor size {self.cardinality}^{self.n_times} = {self.size} exceeds budget {self.budget}"
            )

    @property
    def n_times(self) -> int:
        return self.interior_count + 2

    @property
    def last(self) -> int:
        """Axis of the terminal time t_{N+1}."""
        return self.interior_count + 1

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.cardinality,) * self.n_times

    @property
    def size(self) -> int:
        return self.cardinality**self.n_times

    @classmethod
    def of(cls, values: np.ndarray) -> "StateSpace":
        values = np.asarray(values)
        if values.ndim < 3 or len(set(values.shape)) != 1:
            raise DomainError(f"not a trajectory tensor: shape {values.shape}")
        return cls(values.shape[0], values.ndim - 2)


@dataclass(frozen=True, eq=False)
class SignedMeasure:
    space: StateSpace
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.space.shape:
            raise DomainError(f"shape {values.shape} does not match space {self.space.shape}")
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, values) -> "SignedMeasure":
        values = np.asarray(values, dtype=np.float64)
        return cls(StateSpace.of(values), values)

    def __add__(self, other):
        return combine(self, other, 1.0, 1.0)

    def __sub__(self, other):
        return combine(self, other, 1.0, -1.0)

    def __mul__(self, scalar: float):
        return SignedMeasure(self.space, self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return SignedMeasure(self.space, -self.values)


@dataclass(frozen=True, eq=False)
class JointDistribution:
    """Probability tensor over X^(N+2).

    Construction validates nonnegativity and total mass. A total-mass error at
    or below ``tol`` is removed by renormalization and kept in ``drift``;
    anything larger is rejected.
    """

    space: StateSpace
    values: np.ndarray
    drift: float = field(default=0.0, compare=False)
    tol: float = field(default=PROB_TOL, repr=False, compare=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.space.shape:
            raise DomainError(f"shape {values.shape} does not match space {self.space.shape}")
        if not np.all(np.isfinite(values)):
            raise ValidationError("distribution has non-finite entries")
        if values.min() < 0:
            cell = np.unravel_index(np.argmin(values), values.shape)
            raise ValidationError(f"negative mass {values[cell]:.3e} at cell {_one_based(cell)}")
        total = float(values.sum())
        drift = total - 1.0
        if abs(drift) > self.tol:
            raise ValidationError(f"total mass {total!r} differs from 1 by more than {self.tol:g}")
        if drift != 0.0:
            values = values / total
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "drift", drift)

    @classmethod
    def from_array(cls, values, tol: float = PROB_TOL) -> "JointDistribution":
        values = np.asarray(values, dtype=np.float64)
        return cls(StateSpace.of(values), values, tol=tol)

    @classmethod
    def normalized(cls, values, warn_above: float = PROB_TOL) -> "JointDistribution":
        """Renormalize an arbitrary nonnegative tensor, recording the drift."""
        values = np.asarray(values, dtype=np.float64)
        total = float(values.sum())
        if not total > 0:
            raise ValidationError("cannot normalize a tensor with zero total mass")
        drift = total - 1.0
        if abs(drift) > warn_above:
            log.warning("normalization drift %.3e exceeds %.1e", drift, warn_above)
        out = cls(StateSpace.of(values), values / total)
        object.__setattr__(out, "drift", drift)
        return out

    def as_measure(self) -> SignedMeasure:
        return SignedMeasure(self.space, self.values)

    def min_mass(self) -> float:
        return float(self.values.min())

    def __sub__(self, other):
        return combine(self, other, 1.0, -1.0)


Tensor = Union[JointDistribution, SignedMeasure, np.ndarray]


def values_of(x: Tensor) -> np.ndarray:
    if isinstance(x, (JointDistribution, SignedMeasure)):
        return x.values
    return np.asarray(x, dtype=np.float64)


def _one_based(cell: Iterable[int]) -> tuple[int, ...]:
    return tuple(int(c) + 1 for c in cell)


# -- indexing ---------------------------------------------------------------


def flat_index(trajectory: Sequence[int], space: StateSpace) -> int:
    """Row-major linear index of a 1-based trajectory, ``x_{t_0}`` most significant."""
    if len(trajectory) != space.n_times:
        raise DomainError(f"trajectory has {len(trajectory)} coordinates, expected {space.n_times}")
    idx = 0
    for x in trajectory:
        if not 1 <= x <= space.cardinality:
            raise DomainError(f"coordinate {x} outside 1..{space.cardinality}")
        idx = idx * space.cardinality + (int(x) - 1)
    return idx


def unflat_index(index: int, space: StateSpace) -> tuple[int, ...]:
    if not 0 <= index < space.size:
        raise DomainError(f"index {index} outside 0..{space.size - 1}")
    return _one_based(np.unravel_index(index, space.shape))


# -- marginals and conditionals ---------------------------------------------


def _check_times(times: Iterable[int], n_times: int) -> tuple[int, ...]:
    times = tuple(int(t) for t in times)
    if not times:
        raise DomainError("time subset must be nonempty")
    if list(times) != sorted(set(times)):
        raise DomainError(f"time subset must be sorted and unique, got {times}")
    if times[0] < 0 or times[-1] >= n_times:
        raise DomainError(f"time subset {times} outside 0..{n_times - 1}")
    return times


def marginal(p: Tensor, times: Iterable[int]) -> np.ndarray:
    """Sum out every time axis not in ``times``; result axes follow ``times``."""
    v = values_of(p)
    times = _check_times(times, v.ndim)
    drop = tuple(a for a in range(v.ndim) if a not in times)
    return v.sum(axis=drop) if drop else v.copy()


def conditional(p: Tensor, target_times: Iterable[int], given_times: Iterable[int]) -> np.ndarray:
    """Table of ``p(target | given)``.

    Axes are ordered as the given times (ascending) followed by the target
    times (ascending), so ``table[g][...]`` is a distribution over targets.
    """
    v = values_of(p)
    target = _check_times(sorted(target_times), v.ndim)
    given = _check_times(sorted(given_times), v.ndim)
    if set(target) & set(given):
        raise DomainError(f"target {target} and given {given} overlap")
    union = tuple(sorted(target + given))
    joint = marginal(v, union)
    # reorder joint axes to (given..., target...)
    order = [union.index(t) for t in given + target]
    joint = np.transpose(joint, order)
    denom = marginal(v, given)
    if np.any(denom <= 0):
        cell = tuple(np.argwhere(denom <= 0)[0])
        raise SingularConditioningError(
            f"zero conditioning mass at times {given}, states {_one_based(cell)}", _one_based(cell)
        )
    return joint / denom.reshape(denom.shape + (1,) * len(target))


# -- divergence and geometry ------------------------------------------------


def kl_divergence(p: Tensor, q: Tensor) -> float:
    """KL(p || q) with 0 ln 0 = 0.

    Evaluated termwise as ``p ln(p/q) - p + q`` (each term is nonnegative) so
    that values near zero do not go negative through cancellation. For two
    normalized arguments this equals the usual sum.
    """
    pv, qv = values_of(p), values_of(q)
    if pv.shape != qv.shape:
        raise DomainError(f"shape mismatch {pv.shape} vs {qv.shape}")
    support = pv > 0
    bad = support & (qv <= 0)
    if np.any(bad):
        cell = tuple(np.argwhere(bad)[0])
        raise InfiniteDivergenceError(f"p > 0 where q = 0 at cell {_one_based(cell)}")
    ps, qs = pv[support], qv[support]
    total = np.sum(ps * np.log(ps / qs) - ps + qs) + np.sum(qv[~support])
    return max(float(total), 0.0)


def kl_sum(p: Tensor, q: Tensor) -> float:
    """The raw sum of p ln(p/q) over the support of p, without normalization terms."""
    pv, qv = values_of(p), values_of(q)
    support = pv > 0
    return float(np.sum(pv[support] * np.log(pv[support] / qv[support])))


def _pair(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    av, bv = values_of(a), values_of(b)
    if av.shape != bv.shape:
        raise DomainError(f"shape mismatch {av.shape} vs {bv.shape}")
    return av, bv


def inner(a: Tensor, b: Tensor) -> float:
    av, bv = _pair(a, b)
    return float(np.dot(av.ravel(), bv.ravel()))


def norm_sq(a: Tensor) -> float:
    return inner(a, a)


def norm(a: Tensor) -> float:
    return float(np.sqrt(norm_sq(a)))


def combine(a: Tensor, b: Tensor, alpha: float, beta: float) -> SignedMeasure:
    """alpha * a + beta * b as a signed measure."""
    av, bv = _pair(a, b)
    return SignedMeasure.from_array(alpha * av + beta * bv)
