import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from sobolev_ipm.densities import Categorical, Gaussian, UniformMeasure, mu_average
from sobolev_ipm.grid import Grid, GridField, support_grid
from sobolev_ipm.ipm import (
    FourierFeatures,
    GridFeatures,
    IpmResult,
    LinearFeatures,
    cramer_1d,
    fisher_ipm,
    optimal_critic_gradient_field,
    restricted_ipm,
    sobolev_ipm_cdf_form,
    sobolev_ipm_conditional_form,
    wasserstein1_1d,
)
from sobolev_ipm.pde import solve_critic_pde

P2 = Gaussian([1.0, 0.0], [[1.9, 0.8], [0.8, 1.3]])
Q2 = Gaussian([1.0, -2.0], [[1.9, -0.8], [-0.8, 1.3]])
N01, N11 = Gaussian([0.0], [[1.0]]), Gaussian([1.0], [[1.0]])


class TestFisher:
    def test_identical_is_zero(self):
        assert fisher_ipm(P2, P2, mu_average(P2, P2), 64).value == 0.0

    def test_two_point_masses(self):
        r = fisher_ipm(Categorical([0.0], [1.0]), Categorical([3.0], [1.0]), "counting")
        assert r.meta["squared"] == 2.0

    def test_pearson_case(self):
        p = Categorical([0.0, 1.0], [0.5, 0.5])
        q = Categorical([0.0, 1.0], [0.25, 0.75])
        assert fisher_ipm(p, q, p).meta["squared"] == pytest.approx(0.25, abs=1e-15)

    def test_mu_must_cover_support(self):
        p, q = Categorical([0.0], [1.0]), Categorical([1.0], [1.0])
        with pytest.raises(ValueError):
            fisher_ipm(p, q, Categorical([0.0], [1.0]))

    def test_1d_against_quadrature(self):
        from scipy.integrate import quad

        mu = mu_average(N01, N11)
        f = lambda x: (norm.pdf(x) - norm.pdf(x, 1)) ** 2 / (0.5 * norm.pdf(x) + 0.5 * norm.pdf(x, 1))
        exact = np.sqrt(quad(f, -20, 21, epsabs=1e-14, limit=200)[0])
        r = fisher_ipm(N01, N11, mu, 4097)
        assert r.value == pytest.approx(exact, rel=1e-6)
        assert r.est_error < 1e-4

    def test_gp_measure_rejected(self):
        from sobolev_ipm.densities import GPInterpolation, NoDensityError

        with pytest.raises(NoDensityError):
            fisher_ipm(N01, N11, GPInterpolation(N01, N11), 64)


class TestOneDimensionalOracles:
    def test_point_masses(self):
        p, q = Categorical([0.0], [1.0]), Categorical([3.0], [1.0])
        assert cramer_1d(p, q).value == pytest.approx(3.0, abs=1e-9)
        assert wasserstein1_1d(p, q).value == pytest.approx(3.0, abs=1e-9)

    def test_identical_gaussians(self):
        assert cramer_1d(N01, N01).value == 0.0
        assert wasserstein1_1d(N01, N01).value == 0.0

    def test_against_fine_trapezoid(self):
        x = np.linspace(-12, 13, 1_000_001)
        gap = norm.cdf(x) - norm.cdf(x, 1)
        assert cramer_1d(N01, N11).value == pytest.approx(np.trapezoid(gap**2, x), abs=1e-6)
        assert wasserstein1_1d(N01, N11).value == pytest.approx(np.trapezoid(np.abs(gap), x), abs=1e-6)

    def test_shift_is_w1(self):
        assert wasserstein1_1d(N01, Gaussian([2.5], [[1.0]])).value == pytest.approx(2.5, rel=1e-8)

    @given(st.lists(st.floats(-5, 5), min_size=1, max_size=4, unique=True),
           st.lists(st.floats(-5, 5), min_size=1, max_size=4, unique=True))
    @settings(max_examples=30, deadline=None)
    def test_discrete_w1_symmetric_and_bounded(self, a, b):
        p = Categorical(a, np.full(len(a), 1 / len(a)))
        q = Categorical(b, np.full(len(b), 1 / len(b)))
        w_pq, w_qp = wasserstein1_1d(p, q).value, wasserstein1_1d(q, p).value
        assert w_pq == pytest.approx(w_qp, abs=1e-12)
        assert abs(np.mean(a) - np.mean(b)) <= w_pq + 1e-12


class TestSobolevForms:
    def test_identical_zero(self):
        mu = mu_average(P2, P2)
        assert sobolev_ipm_cdf_form(P2, P2, mu, 32).value == 0.0
        assert sobolev_ipm_conditional_form(P2, P2, mu, 32).value == 0.0

    def test_1d_uniform_measure_matches_cramer(self):
        s = sobolev_ipm_cdf_form(N01, N11, UniformMeasure(1, 1.0), 8193).value
        assert s**2 == pytest.approx(cramer_1d(N01, N11).value, rel=1e-6)

    def test_forms_agree_on_paper_pair(self):
        mu = mu_average(P2, Q2)
        a = sobolev_ipm_cdf_form(P2, Q2, mu, 64).value
        b = sobolev_ipm_conditional_form(P2, Q2, mu, 64).value
        assert a == pytest.approx(b, rel=1e-6)

    def test_independent_products_agree(self):
        p = Gaussian([0.0, 0.0], np.diag([1.0, 2.0]))
        q = Gaussian([0.5, -0.5], np.diag([1.0, 2.0]))
        mu = mu_average(p, q)
        a = sobolev_ipm_cdf_form(p, q, mu, 48).value
        b = sobolev_ipm_conditional_form(p, q, mu, 48).value
        assert a == pytest.approx(b, rel=1e-6)

    def test_1d_matches_pde(self):
        mu = mu_average(N01, N11)
        s = sobolev_ipm_cdf_form(N01, N11, mu, 4097).value
        assert solve_critic_pde(N01, N11, mu, 4097).S == pytest.approx(s, rel=1e-5)

    @pytest.mark.xfail(strict=True, reason="for d = 2 the cdf-form integrand does not decay in the tails "
                                            "(it tends to the marginal gap over mu), so it diverges with the box")
    def test_2d_conditional_form_matches_pde(self):
        mu = mu_average(P2, Q2)
        grid = support_grid([P2, Q2], 128)
        s_pde = solve_critic_pde(P2, Q2, mu, grid).S
        assert sobolev_ipm_conditional_form(P2, Q2, mu, grid).value == pytest.approx(s_pde, rel=0.02)

    def test_2d_cdf_form_dominates_pde_and_grows_with_box(self):
        mu = mu_average(P2, Q2)
        grid = support_grid([P2, Q2], 96)
        s_pde = solve_critic_pde(P2, Q2, mu, grid).S
        s_cdf = sobolev_ipm_cdf_form(P2, Q2, mu, grid).value
        small = Grid(tuple(np.array(grid.lo) / 2), tuple(np.array(grid.hi) / 2), grid.n)
        assert s_cdf > s_pde
        assert sobolev_ipm_cdf_form(P2, Q2, mu, small).value < s_cdf

    def test_result_rejects_negative(self):
        with pytest.raises(ValueError):
            IpmResult(-1.0, "x")


class TestCriticField:
    def test_identical_zero_field(self):
        f = optimal_critic_gradient_field(P2, P2, mu_average(P2, P2), 32)
        assert np.all(f.values == 0.0)

    def test_1d_pointwise(self):
        mu = mu_average(N01, N11)
        f = optimal_critic_gradient_field(N01, N11, mu, 2049)
        x = f.grid.points()
        s = sobolev_ipm_cdf_form(N01, N11, mu, f.grid).value
        expected = (N11.cdf(x) - N01.cdf(x)) / (mu.pdf(x) * s)
        np.testing.assert_allclose(f.values[:, 0], expected, rtol=1e-12, atol=1e-300)

    def test_1d_unit_norm(self):
        mu = mu_average(N01, N11)
        f = optimal_critic_gradient_field(N01, N11, mu, 2049)
        x = f.grid.points()
        assert f.grid.integrate(f.values[:, 0] ** 2 * mu.pdf(x)) == pytest.approx(1.0, rel=1e-10)

    @pytest.mark.xfail(strict=True, reason="the 2-D cdf-form field is dominated by the non-decaying tail term")
    def test_2d_matches_pde_gradient(self):
        mu = mu_average(P2, Q2)
        grid = support_grid([P2, Q2], 96)
        field = optimal_critic_gradient_field(P2, Q2, mu, grid)
        ref = solve_critic_pde(P2, Q2, mu, grid).f_star.gradient()
        x = grid.points()
        w = mu.pdf(x)
        err = np.sqrt(grid.integrate(np.sum((field.values - ref.values) ** 2, -1) * w))
        assert err <= 0.05 * np.sqrt(grid.integrate(np.sum(ref.values**2, -1) * w))


class TestRestricted:
    def test_optimal_critic_as_single_feature(self):
        mu = mu_average(P2, Q2)
        grid = support_grid([P2, Q2], 128)
        sol = solve_critic_pde(P2, Q2, mu, grid)
        r = restricted_ipm(GridFeatures([sol.f_hat]), P2, Q2, mu, grid=grid)
        assert r.result.value == pytest.approx(sol.S, rel=1e-2)

    def test_equal_feature_means_give_zero(self):
        mu = mu_average(N01, N01)
        r = restricted_ipm(LinearFeatures(1), N01, N01, mu, grid=513)
        assert r.result.value == 0.0
        np.testing.assert_array_equal(r.coef, 0.0)

    def test_below_full_distance_and_nested(self):
        mu = mu_average(P2, Q2)
        grid = support_grid([P2, Q2], 64)
        s_pde = solve_critic_pde(P2, Q2, mu, grid).S
        sigma = np.sqrt([1.9, 2.3])  # coordinate std of mu
        feats = FourierFeatures.random(64, grid, 4.0 / sigma, np.random.default_rng(0))
        vals = [restricted_ipm(feats.subset(k), P2, Q2, mu, grid=grid).result.value for k in (4, 16, 64)]
        assert vals[0] <= vals[1] <= vals[2]
        assert vals[2] <= s_pde * (1 + 1e-2)

    def test_linear_sobolev_closed_form(self):
        p, q = Gaussian([1.0], [[1.0]]), Gaussian([-0.5], [[2.0]])
        r = restricted_ipm(LinearFeatures(1), p, q, mu_average(p, q), grid=4097)
        assert r.result.value == pytest.approx(1.5, rel=1e-8)
        assert r.coef[0] == pytest.approx(1.0, rel=1e-8)

    def test_linear_fisher_closed_form(self):
        # Gram under mu = (P+Q)/2 for features (x, 1); c = (m_P - m_Q, 0)
        p, q = Gaussian([1.0], [[1.0]]), Gaussian([-0.5], [[2.0]])
        m = 0.25
        ex2 = 0.5 * (1 + 1.0) + 0.5 * (2 + 0.25)
        gram = np.array([[ex2, m], [m, 1.0]])
        c = np.array([1.5, 0.0])
        r = restricted_ipm(LinearFeatures(1, intercept=True), p, q, mu_average(p, q), norm="fisher", grid=4097)
        assert r.result.value == pytest.approx(np.sqrt(c @ np.linalg.solve(gram, c)), rel=1e-7)

    def test_singular_gram_rejected(self):
        with pytest.raises(np.linalg.LinAlgError):
            restricted_ipm(LinearFeatures(1, intercept=True), N01, N11, mu_average(N01, N11), grid=257)

    def test_unknown_norm(self):
        with pytest.raises(ValueError):
            restricted_ipm(LinearFeatures(1), N01, N11, mu_average(N01, N11), norm="l2", grid=65)

    def test_fourier_gradients_match_finite_differences(self):
        grid = Grid.from_box([-3, -2], [4, 5], 8)
        f = FourierFeatures.random(5, grid, 1.0, np.random.default_rng(1))
        x = np.random.default_rng(2).uniform(-2, 3, (4, 2))
        h = 1e-6
        num = np.stack([(f.values(x + h * e) - f.values(x - h * e)) / (2 * h) for e in np.eye(2)], axis=-1)
        np.testing.assert_allclose(f.gradients(x), num, atol=1e-8)

    def test_fourier_vanish_on_boundary(self):
        grid = Grid.from_box([-3, -2], [4, 5], 8)
        f = FourierFeatures.random(5, grid, 1.0, np.random.default_rng(1))
        edge = np.array([[-3.0, 0.3], [4.0, 1.0], [0.5, 5.0]])
        np.testing.assert_allclose(f.values(edge), 0.0, atol=1e-12)

    def test_grid_features_only_on_own_grid(self):
        grid = Grid.from_box([0.0], [1.0], 9)
        gf = GridFeatures([GridField(grid, np.sin(np.pi * grid.axes[0]))])
        with pytest.raises(TypeError):
            gf.values(np.zeros((1, 1)))
