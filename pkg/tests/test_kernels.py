import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import gamma as gamma_fn
from scipy.special import kv

from gplccm.errors import ConditioningError, ShapeError
from gplccm.kernels import (
    Constant,
    Matern,
    SquaredExponential,
    ard,
    kernel_eval,
    kernel_gradients,
    kernel_matrix,
    pack,
    parse_kernel,
    unpack,
)


def matern_bessel(r, nu, variance, lengthscale):
    """General Matérn form through the modified Bessel function of the second kind."""
    z = np.sqrt(2 * nu) * r / lengthscale
    if z == 0:
        return variance
    return variance * 2 ** (1 - nu) / gamma_fn(nu) * z**nu * kv(nu, z)


def fd_gradients(spec, S, h=1e-6):
    theta = pack(spec)
    out = []
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = h
        out.append((unpack(spec, theta + e)(S) - unpack(spec, theta - e)(S)) / (2 * h))
    return out


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


VARIANTS = {
    "se": SquaredExponential(1.3, 0.8),
    "se_ard": SquaredExponential(0.7, (0.5, 1.7)),
    "matern15": Matern(variance=1.1, lengthscale=0.9, nu=1.5),
    "matern25": Matern(variance=0.6, lengthscale=1.4, nu=2.5),
    "matern25_ard": Matern(variance=2.0, lengthscale=(0.8, 1.2), nu=2.5),
    "constant": Constant(0.8),
    "sum": Constant(0.5) + Matern(variance=1.0, lengthscale=1.0, nu=2.5),
    "product": Constant(2.0) * SquaredExponential(1.0, 0.7),
}


class TestEvaluation:
    def test_zero_distance_gives_variance(self):
        assert kernel_eval(SquaredExponential(1.0, 3.3), [0.2, 0.1], [0.2, 0.1]) == 1.0

    def test_se_unit_distance(self):
        assert kernel_eval(SquaredExponential(1.0, 1.0), [0.0], [1.0]) == pytest.approx(np.exp(-0.5), abs=1e-12)

    @pytest.mark.parametrize("nu", [1.5, 2.5])
    @pytest.mark.parametrize("r", [0.0, 0.3, 1.0, 2.7])
    def test_matern_matches_bessel_form(self, nu, r):
        k = Matern(variance=1.7, lengthscale=0.8, nu=nu)
        assert kernel_eval(k, [0.0], [r]) == pytest.approx(matern_bessel(r, nu, 1.7, 0.8), rel=1e-10)

    def test_matern15_unit_distance(self):
        expected = (1 + np.sqrt(3)) * np.exp(-np.sqrt(3))
        assert kernel_eval(Matern(nu=1.5), [0.0], [1.0]) == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.48335, abs=1e-5)

    def test_ard_scales_each_dimension(self):
        k = SquaredExponential(1.0, (2.0, 0.5))
        assert kernel_eval(k, [0, 0], [2.0, 0.5]) == pytest.approx(np.exp(-1.0), abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            SquaredExponential(1.0, (1.0, 1.0))(np.zeros((2, 3)))
        with pytest.raises(ShapeError):
            Matern()(np.zeros((2, 2)), np.zeros((2, 3)))

    @pytest.mark.parametrize("name", VARIANTS)
    def test_symmetry(self, name, rng):
        a, b = rng.normal(size=2), rng.normal(size=2)
        k = VARIANTS[name]
        assert kernel_eval(k, a, b) == kernel_eval(k, b, a)

    def test_smoothness_ordering(self):
        for r in np.linspace(0.05, 0.95, 10):
            m15 = kernel_eval(Matern(nu=1.5), [0.0], [r])
            m25 = kernel_eval(Matern(nu=2.5), [0.0], [r])
            se = kernel_eval(SquaredExponential(), [0.0], [r])
            assert m15 < m25 < se

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValueError):
            SquaredExponential(variance=0.0)
        with pytest.raises(ValueError):
            Matern(lengthscale=-1.0)
        with pytest.raises(ValueError):
            Matern(nu=0.5)
        with pytest.raises(ValueError):
            Constant(0.0)


class TestMatrix:
    def test_single_point(self):
        K = kernel_matrix(SquaredExponential(2.0, 1.0), np.zeros((1, 1)), jitter=1e-6)
        np.testing.assert_allclose(K, [[2.0 + 1e-6]], rtol=0, atol=1e-15)

    def test_duplicate_rows_rank_one(self):
        K = kernel_matrix(Matern(variance=1.5), np.ones((2, 2)), jitter=0)
        np.testing.assert_array_equal(K, np.full((2, 2), 1.5))

    @pytest.mark.parametrize("name", VARIANTS)
    def test_matches_pairwise_eval(self, name, rng):
        S = rng.normal(size=(5, 2))
        k = VARIANTS[name]
        K = kernel_matrix(k, S, jitter=0)
        oracle = np.array([[kernel_eval(k, a, b) for b in S] for a in S])
        np.testing.assert_allclose(K, oracle, atol=1e-12)

    @pytest.mark.parametrize("name", VARIANTS)
    def test_positive_semidefinite(self, name, rng):
        S = rng.normal(size=(20, 2))
        assert np.linalg.eigvalsh(kernel_matrix(VARIANTS[name], S, jitter=0)).min() >= -1e-8

    @pytest.mark.parametrize("name", ["se", "se_ard", "matern15", "matern25"])
    def test_translation_invariance(self, name, rng):
        S = rng.normal(size=(6, 2))
        k = VARIANTS[name]
        np.testing.assert_allclose(k(S), k(S + np.array([3.0, -7.5])), atol=1e-12)

    def test_jitter_escalates_on_duplicates(self):
        S = np.zeros((3, 1))
        K = kernel_matrix(SquaredExponential(), S)
        assert np.linalg.eigvalsh(K).min() > 0

    def test_conditioning_error_reports_jitter(self):
        class Indefinite(Constant):
            def __call__(self, A, B=None):
                return np.array([[1.0, 2.0], [2.0, 1.0]])

        with pytest.raises(ConditioningError) as info:
            kernel_matrix(Indefinite(1.0), np.zeros((2, 1)))
        assert info.value.jitter == pytest.approx(1e-2)

    def test_negative_jitter_rejected(self):
        with pytest.raises(ValueError):
            kernel_matrix(Matern(), np.zeros((2, 1)), jitter=-1.0)


class TestGradients:
    def test_se_variance_gradient_is_matrix(self, rng):
        S = rng.normal(size=(4, 1))
        k = SquaredExponential(1.7, 0.9)
        np.testing.assert_allclose(kernel_gradients(k, S)[0], k(S), atol=1e-14)

    def test_constant_gradient(self):
        g = kernel_gradients(Constant(0.3), np.zeros((3, 2)))
        assert len(g) == 1
        np.testing.assert_allclose(g[0], 0.3)

    @pytest.mark.parametrize("name", VARIANTS)
    def test_finite_differences(self, name, rng):
        k = VARIANTS[name]
        S = rng.normal(size=(int(rng.integers(2, 9)), 2))
        for a, b in zip(kernel_gradients(k, S), fd_gradients(k, S)):
            assert rel_err(a, b) < 1e-5

    def test_fixed_entries_have_no_gradient(self):
        k = Matern(nu=1.5, fixed={"variance"})
        assert k.n_free == 1
        assert len(kernel_gradients(k, np.zeros((2, 1)))) == 1


class TestPacking:
    def test_unit_se_packs_to_zeros(self):
        np.testing.assert_array_equal(pack(SquaredExponential(1.0, 1.0)), [0.0, 0.0])

    def test_round_trip_sum(self):
        k = Constant(0.37) + Matern(variance=2.3, lengthscale=0.41, nu=2.5)
        back = unpack(k, pack(k))
        assert back.left.value == pytest.approx(0.37, rel=1e-14)
        assert back.right.variance == pytest.approx(2.3, rel=1e-14)
        assert back.right.lengthscale == pytest.approx(0.41, rel=1e-14)

    def test_wrong_length(self):
        with pytest.raises(ShapeError):
            unpack(SquaredExponential(), np.zeros(3))

    @given(st.lists(st.floats(-3, 3), min_size=4, max_size=4))
    def test_pack_unpack_identity(self, theta):
        k = Constant(1.0) * SquaredExponential(1.0, (1.0, 1.0))
        assert k.n_free == 4
        np.testing.assert_allclose(pack(unpack(k, theta)), theta, atol=1e-12)

    def test_ard_expands_lengthscale(self):
        k = ard(Matern(lengthscale=0.5), 3)
        assert k.lengthscale == (0.5, 0.5, 0.5)
        assert k.n_free == 4


class TestParser:
    @pytest.mark.parametrize("name", VARIANTS)
    def test_expr_round_trip(self, name):
        k = VARIANTS[name]
        assert parse_kernel(k.expr()) == k

    def test_matern_expression(self):
        k = parse_kernel("matern(nu=2.5, variance=1.0, lengthscale=1.0)")
        assert k == Matern(variance=1.0, lengthscale=1.0, nu=2.5)

    def test_sum_expression(self):
        k = parse_kernel("constant(1.0) + matern(nu=2.5, variance=2.0, lengthscale=0.5)")
        assert isinstance(k.left, Constant)
        assert k.right.variance == 2.0

    def test_precedence(self):
        k = parse_kernel("constant(2) + se() * constant(3)")
        assert k.expr().startswith("constant(2.0) + ")

    @pytest.mark.parametrize("bad", ["matern(nu=3)", "foo()", "se(", "se() +", "constant(-1)"])
    def test_rejects_malformed(self, bad):
        with pytest.raises(ValueError):
            parse_kernel(bad)


class TestCounting:
    def test_matern_counts_smoothness(self):
        assert Matern().n_counted == 3
        assert Matern(fixed={"variance"}).n_counted == 2

    def test_composite_counts_leaves(self):
        k = Constant(1.0) + Matern(fixed={"variance"})
        assert k.n_counted == 3
        assert k.n_free == 2
