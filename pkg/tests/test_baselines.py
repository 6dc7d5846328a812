import numpy as np
import pytest

from fpn_oamp.baselines import (BaselineConfig, bg_posterior, fista_estimate, lasso_objective, ls_estimate, nmse,
                                oamp_bg_estimate, omp_estimate, soft_threshold)


def problem(m=40, n=80, k=4, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(m, n)) / np.sqrt(m)
    h = np.zeros(n)
    h[rng.choice(n, k, replace=False)] = rng.normal(size=k) + np.sign(rng.normal(size=k))
    y = M @ h + noise * rng.normal(size=m)
    return M, h, y


class TestLS:
    def test_normal_equations_overdetermined(self):
        rng = np.random.default_rng(1)
        M, y = rng.normal(size=(30, 10)), rng.normal(size=30)
        assert np.allclose(ls_estimate(y, M), np.linalg.solve(M.T @ M, M.T @ y))

    def test_min_norm_underdetermined(self):
        M, _, y = problem()
        h = ls_estimate(y, M)
        assert np.allclose(M @ h, y)
        assert np.allclose(h, M.T @ np.linalg.solve(M @ M.T, y))


class TestOMP:
    def test_exact_one_sparse(self):
        M, h, y = problem(k=1, seed=3)
        est, _ = omp_estimate(y, M, k=1)
        assert np.allclose(est, h, atol=1e-12)

    def test_exact_k_sparse_noiseless(self):
        M, h, y = problem(k=4, seed=4)
        est, _ = omp_estimate(y, M, residual_tol=1e-10)
        assert nmse(est, h) < 1e-20

    def test_residual_non_increasing(self):
        M, _, y = problem(noise=0.1, seed=5)
        _, _, res = omp_estimate(y, M, k=20, return_residuals=True)
        assert all(b <= a + 1e-12 for a, b in zip(res, res[1:]))

    def test_full_rank_matches_ls(self):
        rng = np.random.default_rng(6)
        M, y = rng.normal(size=(30, 10)), rng.normal(size=30)
        est, _ = omp_estimate(y, M, k=10)
        assert np.allclose(est, ls_estimate(y, M))

    def test_needs_stopping_rule(self):
        M, _, y = problem()
        with pytest.raises(ValueError):
            omp_estimate(y, M)
        with pytest.raises(ValueError):
            omp_estimate(y, M, k=0)


class TestFISTA:
    def test_soft_threshold(self):
        assert np.array_equal(soft_threshold(np.array([-3.0, -0.5, 0.0, 0.5, 3.0]), 1.0), [-2, 0, 0, 0, 2])

    def test_large_lambda_gives_zero(self):
        M, _, y = problem()
        lam = 1.01 * np.max(np.abs(M.T @ y))
        est, _ = fista_estimate(y, M, lam, 50)
        assert np.all(est == 0)

    def test_zero_lambda_matches_ls(self):
        rng = np.random.default_rng(7)
        M, y = rng.normal(size=(30, 10)), rng.normal(size=30)
        est, _ = fista_estimate(y, M, 0.0, 3000)
        assert np.allclose(est, ls_estimate(y, M), atol=1e-6)

    def test_objective_converges(self):
        M, _, y = problem(noise=0.05)
        lam = 0.05 * np.max(np.abs(M.T @ y))
        _, _, obj = fista_estimate(y, M, lam, 500, return_objective=True)
        # FISTA is not monotone step to step; the envelope must still settle at the minimum
        assert obj[-1] <= min(obj) + 1e-9
        assert obj[-1] < lasso_objective(np.zeros(80), y, M, lam)

    def test_optimality_conditions(self):
        M, _, y = problem(noise=0.05, seed=8)
        lam = 0.1 * np.max(np.abs(M.T @ y))
        h, _ = fista_estimate(y, M, lam, 3000)
        g = M.T @ (y - M @ h)
        on = h != 0
        assert np.allclose(g[on], lam * np.sign(h[on]), atol=1e-6)
        assert np.all(np.abs(g[~on]) <= lam + 1e-6)

    def test_trace_length(self):
        M, h, y = problem()
        _, tr = fista_estimate(y, M, 0.01, 17, h_true=h)
        assert len(tr) == 17


class TestOAMP:
    def test_dense_prior_is_linear_shrinkage(self):
        u = np.linspace(-2, 2, 9)
        mean, var = bg_posterior(u, 0.5, 1.0, 2.0)
        assert np.allclose(mean, 0.8 * u)
        assert np.allclose(var, 0.4)

    def test_zero_input(self):
        mean, _ = bg_posterior(np.zeros(5), 0.1, 0.1, 1.0)
        assert np.all(mean == 0)

    def test_posterior_mean_oracle(self):
        # brute-force the two-component mixture posterior
        u, tau2, p, var = 0.7, 0.2, 0.3, 1.5
        on = p * np.exp(-0.5 * u * u / (var + tau2)) / np.sqrt(var + tau2)
        off = (1 - p) * np.exp(-0.5 * u * u / tau2) / np.sqrt(tau2)
        expected = on / (on + off) * var / (var + tau2) * u
        assert bg_posterior(np.array([u]), tau2, p, var)[0][0] == pytest.approx(expected, rel=1e-12)

    def test_monotone_noiseless_sparse(self):
        M, h, y = problem(m=60, n=100, k=5, seed=9)
        _, tr = oamp_bg_estimate(y, M, 0.05, float(np.mean(h[h != 0] ** 2)), 1e-10, 10, h_true=h)
        assert all(b <= a * (1 + 1e-6) for a, b in zip(tr, tr[1:]))
        assert tr[-1] < 1e-3

    def test_lmmse_variant_runs(self):
        M, h, y = problem(noise=0.01, seed=10)
        est, _ = oamp_bg_estimate(y, M, 0.05, 1.0, 1e-4, 20, lmmse=True)
        assert nmse(est, h) < 0.1

    @pytest.mark.parametrize("sparsity,var", [(0.0, 1.0), (1.5, 1.0), (0.1, 0.0)])
    def test_invalid_prior(self, sparsity, var):
        M, _, y = problem()
        with pytest.raises(ValueError):
            oamp_bg_estimate(y, M, sparsity, var, 0.1, 5)


def test_config_validation():
    with pytest.raises(ValueError):
        BaselineConfig(max_iters=0)
    with pytest.raises(ValueError):
        BaselineConfig(tolerance=0.0)
