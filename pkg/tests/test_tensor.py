import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imflab.tensor import (
    DomainError,
    InfiniteDivergenceError,
    JointDistribution,
    SignedMeasure,
    SingularConditioningError,
    StateSpace,
    ValidationError,
    conditional,
    flat_index,
    inner,
    kl_divergence,
    marginal,
    norm_sq,
    unflat_index,
)

from conftest import random_joint


class TestFlatIndex:
    def test_first_and_last_cell(self):
        space = StateSpace(2, 1)
        assert flat_index((1, 1, 1), space) == 0
        assert flat_index((2, 2, 2), space) == 7

    def test_matches_enumeration(self):
        space = StateSpace(3, 1)
        order = list(itertools.product((1, 2, 3), repeat=3))
        assert order.index((1, 2, 3)) == 5
        assert flat_index((1, 2, 3), space) == 5

    @pytest.mark.parametrize("k,n", [(2, 1), (3, 2), (4, 1)])
    def test_round_trip(self, k, n):
        space = StateSpace(k, n)
        for i in range(space.size):
            assert flat_index(unflat_index(i, space), space) == i

    def test_out_of_range(self):
        space = StateSpace(2, 1)
        with pytest.raises(DomainError):
            flat_index((1, 3, 1), space)
        with pytest.raises(DomainError):
            flat_index((0, 1, 1), space)
        with pytest.raises(DomainError):
            unflat_index(8, space)


class TestStateSpace:
    def test_rejects_degenerate(self):
        with pytest.raises(DomainError):
            StateSpace(1, 1)
        with pytest.raises(DomainError):
            StateSpace(2, 0)

    def test_budget(self):
        with pytest.raises(DomainError, match="budget"):
            StateSpace(10, 6)
        StateSpace(10, 5)


class TestJointDistribution:
    def test_small_drift_renormalized(self):
        v = np.full((2, 2, 2), 1 / 8) * (1 + 5e-13)
        p = JointDistribution.from_array(v)
        assert p.drift == pytest.approx(5e-13, rel=1e-3)
        assert abs(p.values.sum() - 1) < 1e-15

    def test_large_drift_rejected(self):
        with pytest.raises(ValidationError):
            JointDistribution.from_array(np.full((2, 2, 2), 0.13))

    def test_negative_rejected(self):
        v = np.full((2, 2, 2), 1 / 8)
        v[0, 1, 0] = -1e-3
        v[0, 0, 0] += 1e-3
        with pytest.raises(ValidationError, match=r"\(1, 2, 1\)"):
            JointDistribution.from_array(v)


class TestMarginal:
    def test_all_times_is_identity(self, rng):
        p = random_joint(rng, 2, 1)
        np.testing.assert_array_equal(marginal(p, (0, 1, 2)), p.values)

    def test_uniform(self):
        p = JointDistribution.from_array(np.full((2, 2, 2), 1 / 8))
        np.testing.assert_allclose(marginal(p, (0,)), [0.5, 0.5], atol=1e-15)

    def test_brute_force(self, rng):
        p = random_joint(rng, 3, 1)
        expected = np.zeros((3, 3))
        for a, b, c in itertools.product(range(3), repeat=3):
            expected[a, c] += p.values[a, b, c]
        np.testing.assert_allclose(marginal(p, (0, 2)), expected, atol=1e-15)

    def test_empty_rejected(self, rng):
        with pytest.raises(DomainError):
            marginal(random_joint(rng, 2, 1), ())

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 3), n=st.integers(1, 2), data=st.data())
    def test_nested_marginals(self, seed, k, n, data):
        p = random_joint(np.random.default_rng(seed), k, n)
        times = list(range(n + 2))
        outer = sorted(data.draw(st.sets(st.sampled_from(times), min_size=1)))
        inner_ = sorted(data.draw(st.sets(st.sampled_from(outer), min_size=1)))
        m_outer = marginal(p, outer)
        positions = [outer.index(t) for t in inner_]
        np.testing.assert_allclose(marginal(m_outer, positions) if m_outer.ndim >= 1 else m_outer,
                                   marginal(p, inner_), atol=1e-13, rtol=0)


class TestConditional:
    def test_independent_uniform(self):
        p = JointDistribution.from_array(np.full((3, 3, 3), 1 / 27))
        np.testing.assert_allclose(conditional(p, (1, 2), (0,)), 1 / 9, atol=1e-15)

    def test_brute_force_interior_given_endpoints(self, rng):
        p = random_joint(rng, 2, 1)
        c = conditional(p, (1,), (0, 2))
        for a, b, e in itertools.product(range(2), repeat=3):
            denom = sum(p.values[a, x, e] for x in range(2))
            assert c[a, e, b] == pytest.approx(p.values[a, b, e] / denom, abs=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), k=st.integers(2, 3), n=st.integers(1, 2), data=st.data())
    def test_chain_rule(self, seed, k, n, data):
        p = random_joint(np.random.default_rng(seed), k, n)
        times = range(n + 2)
        given_ = sorted(data.draw(st.sets(st.sampled_from(times), min_size=1, max_size=n + 1)))
        target = [t for t in times if t not in given_]
        c = conditional(p, target, given_)
        g = marginal(p, given_)
        joint = c * g.reshape(g.shape + (1,) * len(target))
        order = given_ + target
        np.testing.assert_allclose(np.transpose(joint, np.argsort(order)), p.values, atol=1e-12, rtol=0)

    def test_slices_sum_to_one(self, rng):
        c = conditional(random_joint(rng, 3, 2), (1, 2), (0, 3))
        np.testing.assert_allclose(c.sum(axis=(2, 3)), 1.0, atol=1e-13)

    def test_zero_mass_reports_cell(self):
        v = np.zeros((2, 2, 2))
        v[0] = 1 / 4
        p = JointDistribution.from_array(v)
        with pytest.raises(SingularConditioningError) as exc:
            conditional(p, (1,), (0,))
        assert exc.value.cell == (2,)

    def test_overlap_rejected(self, rng):
        with pytest.raises(DomainError):
            conditional(random_joint(rng, 2, 1), (0, 1), (1,))


class TestKL:
    def test_self_is_zero(self, rng):
        p = random_joint(rng, 3, 1)
        assert kl_divergence(p, p) == 0.0

    def test_binary_product_value(self):
        # direct evaluation of the defining sum on the differing factor
        expected = 0.5 * math.log(0.5 / 0.25) + 0.5 * math.log(0.5 / 0.75)
        assert expected == pytest.approx(0.1438410362, abs=1e-10)
        u = np.array([0.5, 0.5])
        p = np.einsum("a,b,c->abc", np.array([0.5, 0.5]), u, u)
        q = np.einsum("a,b,c->abc", np.array([0.25, 0.75]), u, u)
        assert kl_divergence(p, q) == pytest.approx(expected, abs=1e-15)

    def test_zero_cell_contributes_nothing(self):
        p = np.full((2, 2, 2), 1 / 6)
        p[0, 0, :] = 0.0
        q = np.full((2, 2, 2), 1 / 8)
        assert kl_divergence(p, q) == pytest.approx(math.log(8 / 6), abs=1e-15)

    def test_infinite(self):
        p = np.full((2, 2, 2), 1 / 8)
        q = np.full((2, 2, 2), 1 / 6)
        q[1, 1, :] = 0.0
        with pytest.raises(InfiniteDivergenceError):
            kl_divergence(p, q)

    def test_pinsker_seeded(self):
        rng = np.random.default_rng(7)
        for _ in range(1000):
            k, n = rng.integers(2, 4), rng.integers(1, 3)
            p, q = random_joint(rng, k, n), random_joint(rng, k, n)
            kl = kl_divergence(p, q)
            assert kl >= 0.5 * np.abs(p.values - q.values).sum() ** 2


class TestEuclidean:
    def test_ones_norm(self):
        assert norm_sq(np.ones((2, 2, 2))) == 8.0

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_bilinearity(self, seed):
        rng = np.random.default_rng(seed)
        a = SignedMeasure.from_array(rng.standard_normal((3, 3, 3)))
        b = SignedMeasure.from_array(rng.standard_normal((3, 3, 3)))
        lhs = norm_sq(a + b)
        rhs = norm_sq(a) + 2 * inner(a, b) + norm_sq(b)
        assert lhs == pytest.approx(rhs, rel=1e-12)
        assert norm_sq(a) > 0
        assert norm_sq(a - a) == 0

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            inner(np.ones((2, 2, 2)), np.ones((3, 3, 3)))
