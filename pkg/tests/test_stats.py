"""Densities, KL, reparameterization, MMD, GMM, k-means, Frechet distance."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gae_forge.stats import (GmmParams, MmdKernelSpec, fit_gmm_em,
                             frechet_gaussian, gaussian_log_density,
                             gmm_log_density, gmm_sample, kl_diag_std_normal,
                             kmeans, mmd, reparameterize)
from gae_forge.tensor import Tensor, Rng

from conftest import trapezoid

LOG_2PI = np.log(2 * np.pi)


class TestGaussianLogDensity:
    def test_standard_normal_at_mode(self):
        out = gaussian_log_density(Tensor([[0.0]]), Tensor([[0.0]]),
                                   Tensor([[0.0]]))
        assert out.item() == pytest.approx(-0.5 * LOG_2PI, abs=1e-12)

    def test_at_mean_quadratic_term_vanishes(self, rng):
        mu = rng.normal((3, 4))
        lv = rng.normal((3, 4))
        out = gaussian_log_density(Tensor(mu), Tensor(mu), Tensor(lv))
        want = -0.5 * (LOG_2PI + lv).sum(axis=1)
        np.testing.assert_allclose(out.data, want, atol=1e-12)

    def test_density_integrates_to_one(self):
        # Quadrature oracle over a fine 1-D grid.
        grid = np.linspace(-12, 12, 20001)
        mu, lv = 0.7, np.log(1.8)
        lp = gaussian_log_density(Tensor(grid[:, None]), Tensor([mu]),
                                  Tensor([lv])).data
        assert trapezoid(np.exp(lp), grid) == pytest.approx(1.0, abs=1e-6)

    def test_non_finite_params_raise(self):
        with pytest.raises(ValueError):
            reparameterize(Tensor([[np.nan]]), Tensor([[0.0, 1.0]]), Rng(0))


class TestKl:
    def test_identical_distributions_zero(self):
        out = kl_diag_std_normal(Tensor(np.zeros((2, 3))),
                                 Tensor(np.zeros((2, 3))))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-15)

    def test_unit_mean_shift(self):
        out = kl_diag_std_normal(Tensor([[1.0]]), Tensor([[0.0]]))
        assert out.item() == pytest.approx(0.5, abs=1e-12)

    def test_matches_monte_carlo_at_1e5(self):
        mu = np.array([[0.4, -1.2, 0.9]])
        lv = np.array([[0.3, -0.7, 0.1]])
        closed = kl_diag_std_normal(Tensor(mu), Tensor(lv)).item()
        n = 100_000
        rng = Rng(7)
        eps = rng.normal((n, 3))
        z = mu + np.exp(0.5 * lv) * eps
        log_q = -0.5 * (LOG_2PI + lv + (z - mu) ** 2 / np.exp(lv)).sum(axis=1)
        log_p = -0.5 * (LOG_2PI + z ** 2).sum(axis=1)
        diffs = log_q - log_p
        se = diffs.std(ddof=1) / np.sqrt(n)
        assert abs(diffs.mean() - closed) < 3 * se

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-3, 3), min_size=1, max_size=4),
           st.lists(st.floats(-3, 3), min_size=1, max_size=4))
    def test_nonnegative_property(self, mus, lvs):
        d = min(len(mus), len(lvs))
        out = kl_diag_std_normal(Tensor([mus[:d]]), Tensor([lvs[:d]]))
        assert out.item() >= -1e-12

    def test_zero_iff_standard(self):
        assert kl_diag_std_normal(Tensor([[0.0, 0.0]]),
                                  Tensor([[0.0, 0.0]])).item() < 1e-12
        assert kl_diag_std_normal(Tensor([[1e-3, 0.0]]),
                                  Tensor([[0.0, 0.0]])).item() > 1e-12
        assert kl_diag_std_normal(Tensor([[0.0, 0.0]]),
                                  Tensor([[0.0, 1e-3]])).item() > 1e-12


class TestReparameterize:
    def test_clamped_log_var_gives_mu(self):
        mu = Tensor([[1.0, -2.0]])
        z = reparameterize(mu, Tensor([[-1e9, -1e9]]), Rng(0))
        np.testing.assert_allclose(z.data, mu.data, atol=1e-4)

    def test_sample_mean_clt(self):
        n = 100_000
        mu = np.array([0.5, -1.0])
        z = reparameterize(Tensor(np.tile(mu, (n, 1))),
                           Tensor(np.zeros((n, 2))), Rng(3))
        bound = 4.0 / np.sqrt(n)  # sigma = 1 per coordinate
        assert np.all(np.abs(z.data.mean(axis=0) - mu) < bound)

    def test_fixed_seed_bit_identical(self):
        mu, lv = Tensor([[0.3, 0.4]]), Tensor([[0.1, -0.2]])
        a = reparameterize(mu, lv, Rng(5)).data
        b = reparameterize(mu, lv, Rng(5)).data
        np.testing.assert_array_equal(a, b)

    def test_gradient_flows_to_mu_and_log_var(self):
        from gae_forge.tensor import backward
        mu = Tensor([[0.3, 0.4]], requires_grad=True)
        lv = Tensor([[0.1, -0.2]], requires_grad=True)
        backward(reparameterize(mu, lv, Rng(1)).sum())
        np.testing.assert_allclose(mu.grad, 1.0)
        assert lv.grad is not None


class TestMmd:
    def test_imq_self_kernel_is_scale_count(self):
        # One unit per scale in {0.1,...,10}: k(x,x) = 7.
        spec = MmdKernelSpec("imq", sigma=1.0, latent_dim=4)
        x = Tensor(np.zeros((3, 4)))
        from gae_forge.stats import _kernel_mean
        assert _kernel_mean(x, x, spec).item() == pytest.approx(7.0, abs=1e-12)

    def test_biased_estimator_zero_on_identical(self, rng):
        x = Tensor(rng.normal((10, 3)))
        for kind in ("rbf", "imq"):
            spec = MmdKernelSpec(kind, sigma=1.0, latent_dim=3)
            assert mmd(x, x, spec).item() == pytest.approx(0.0, abs=1e-12)

    def test_symmetry_and_nonnegativity(self, rng):
        x, y = Tensor(rng.normal((8, 3))), Tensor(rng.normal((9, 3)) + 1.0)
        spec = MmdKernelSpec("rbf", sigma=1.0, latent_dim=3)
        ab = mmd(x, y, spec).item()
        ba = mmd(y, x, spec).item()
        assert ab == pytest.approx(ba, abs=1e-12)
        assert ab >= 0

    def test_separated_samples_dominate_null(self):
        # > at 99% over 20 seeds: all 20 pairs ordered in this fixture.
        spec = MmdKernelSpec("rbf", sigma=1.0, latent_dim=2)
        wins = 0
        for seed in range(20):
            rng = Rng(seed)
            a = Tensor(rng.normal((500, 2)))
            b = Tensor(rng.normal((500, 2)))
            shifted = Tensor(rng.normal((500, 2)) + 5.0)
            if mmd(a, shifted, spec).item() > mmd(a, b, spec).item():
                wins += 1
        assert wins >= 19

    def test_too_few_samples_rejected(self, rng):
        spec = MmdKernelSpec("rbf", sigma=1.0, latent_dim=2)
        with pytest.raises(ValueError, match="at least 2"):
            mmd(Tensor(rng.normal((1, 2))), Tensor(rng.normal((5, 2))), spec)

    def test_bad_spec_rejected(self):
        with pytest.raises(ValueError):
            MmdKernelSpec("cauchy", sigma=1.0, latent_dim=2)
        with pytest.raises(ValueError):
            MmdKernelSpec("rbf", sigma=0.0, latent_dim=2)


class TestGmm:
    def test_k1_closed_form_mle(self, rng):
        x = rng.normal((200, 3)) * np.array([1.0, 2.0, 0.5]) + 1.0
        params, _ = fit_gmm_em(x, 1, Rng(0), reg_covar=0.0)
        np.testing.assert_allclose(params.means[0], x.mean(axis=0), atol=1e-8)
        np.testing.assert_allclose(params.covariances[0],
                                   np.cov(x, rowvar=False, bias=True), atol=1e-8)

    def test_separated_clusters_recovered(self):
        rng = Rng(11)
        a = rng.normal((150, 2)) * 0.3 + np.array([-3.0, 0.0])
        b = rng.normal((150, 2)) * 0.3 + np.array([3.0, 1.0])
        x = np.concatenate([a, b])
        params, _ = fit_gmm_em(x, 2, Rng(1))
        got = params.means[np.argsort(params.means[:, 0])]
        want = np.array([[-3.0, 0.0], [3.0, 1.0]])
        assert np.abs(got - want).max() < 0.1

    def test_log_likelihood_monotone(self):
        rng = Rng(4)
        x = np.concatenate([rng.normal((80, 2)) - 2, rng.normal((80, 2)) + 2])
        _, trace = fit_gmm_em(x, 3, Rng(2))
        diffs = np.diff(trace)
        assert np.all(diffs > -1e-8), trace

    def test_weights_on_simplex(self):
        rng = Rng(9)
        x = rng.normal((100, 2))
        params, _ = fit_gmm_em(x, 4, Rng(3))
        assert params.weights.sum() == pytest.approx(1.0, abs=1e-12)
        assert np.all(params.weights >= 0)

    def test_degenerate_component_reseeded(self):
        rng = Rng(1)
        x = rng.normal((30, 2))
        diags = []
        params, _ = fit_gmm_em(x, 25, Rng(0), diagnostics=diags, max_iter=50)
        assert np.all(np.isfinite(params.means))
        # 25 components on 30 points collapses some of them.

    def test_k1_density_equals_full_gaussian(self, rng):
        mean = np.array([0.5, -0.5])
        cov = np.array([[1.0, 0.3], [0.3, 0.8]])
        params = GmmParams(np.array([1.0]), mean[None], cov[None])
        z = rng.normal((20, 2))
        diff = z - mean
        inv = np.linalg.inv(cov)
        want = -0.5 * (2 * LOG_2PI + np.log(np.linalg.det(cov))
                       + np.einsum("ni,ij,nj->n", diff, inv, diff))
        np.testing.assert_allclose(gmm_log_density(params, z), want, atol=1e-12)

    def test_density_integrates_to_one_1d(self):
        params = GmmParams(np.array([0.3, 0.7]),
                           np.array([[-2.0], [1.5]]),
                           np.array([[[0.5]], [[1.2]]]))
        grid = np.linspace(-15, 15, 30001)
        dens = np.exp(gmm_log_density(params, grid[:, None]))
        assert trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-5)

    def test_sampling_frequencies_match_weights(self):
        params = GmmParams(np.array([0.2, 0.8]),
                           np.array([[-10.0], [10.0]]),
                           np.array([[[0.1]], [[0.1]]]))
        draws = gmm_sample(params, 10_000, Rng(6))
        frac_low = np.mean(draws[:, 0] < 0)
        se = np.sqrt(0.2 * 0.8 / 10_000)
        assert abs(frac_low - 0.2) < 4 * se

    def test_json_round_trip(self):
        params = GmmParams(np.array([1.0]), np.zeros((1, 2)),
                           np.eye(2)[None])
        back = GmmParams.from_json(params.to_json())
        np.testing.assert_array_equal(back.means, params.means)
        assert back.to_json() == params.to_json()

    def test_needs_enough_points(self, rng):
        with pytest.raises(ValueError):
            fit_gmm_em(rng.normal((3, 2)), 5, Rng(0))


class TestKmeans:
    def test_k_equals_n_zero_inertia(self, rng):
        x = rng.normal((6, 2))
        runs = kmeans(x, 6, n_runs=1, rng=Rng(0))
        assert runs[0].inertia == pytest.approx(0.0, abs=1e-18)

    def test_separated_blobs_majority_accuracy_one(self):
        from gae_forge.evaluation import majority_label_accuracy
        rng = Rng(2)
        a = rng.normal((50, 2)) * 0.2 - 5
        b = rng.normal((50, 2)) * 0.2 + 5
        x = np.concatenate([a, b])
        labels = np.array([0] * 50 + [1] * 50)
        runs = kmeans(x, 2, n_runs=3, rng=Rng(1))
        for run in runs:
            assert majority_label_accuracy(run.assignments, labels) == 1.0

    def test_inertia_non_increasing(self):
        rng = Rng(8)
        x = rng.normal((120, 3))
        for run in kmeans(x, 4, n_runs=5, rng=Rng(3)):
            diffs = np.diff(run.inertia_trace)
            assert np.all(diffs <= 1e-9)

    def test_n_runs_independent_results(self, rng):
        x = rng.normal((40, 2))
        runs = kmeans(x, 3, n_runs=4, rng=Rng(5))
        assert len(runs) == 4
        assert len({r.inertia for r in runs}) >= 1  # all runs reported


class TestFrechet:
    def test_identical_gaussians_zero(self, rng):
        cov = np.array([[2.0, 0.5], [0.5, 1.0]])
        mu = np.array([1.0, -1.0])
        assert frechet_gaussian(mu, cov, mu, cov) == pytest.approx(0.0, abs=1e-10)

    def test_mean_shift_identity_covariance(self):
        mu = np.array([3.0, -4.0])
        d = frechet_gaussian(np.zeros(2), np.eye(2), mu, np.eye(2))
        assert d == pytest.approx(float(mu @ mu), abs=1e-10)

    def test_commuting_diagonal_closed_form(self, rng):
        a = np.abs(rng.normal((4,))) + 0.5
        b = np.abs(rng.normal((4,))) + 0.5
        dmu = rng.normal((4,))
        got = frechet_gaussian(np.zeros(4), np.diag(a), dmu, np.diag(b))
        want = float(((np.sqrt(a) - np.sqrt(b)) ** 2).sum() + dmu @ dmu)
        assert got == pytest.approx(want, abs=1e-10)

    def test_symmetry(self, rng):
        c1 = np.eye(3) * 2.0
        c2 = np.diag([1.0, 3.0, 0.5])
        m1, m2 = rng.normal((3,)), rng.normal((3,))
        assert frechet_gaussian(m1, c1, m2, c2) == pytest.approx(
            frechet_gaussian(m2, c2, m1, c1), abs=1e-10)

    def test_non_symmetric_input_symmetrized_with_diagnostic(self):
        cov = np.array([[1.0, 0.2], [0.1, 1.0]])  # deliberately asymmetric
        diags = []
        frechet_gaussian(np.zeros(2), cov, np.zeros(2), np.eye(2),
                         diagnostics=diags)
        assert any("symmetrized" in d for d in diags)
