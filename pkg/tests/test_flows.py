"""Flow transforms: log-determinants against numerical Jacobians,
invertibility, chain composition, and the standalone density model."""
import numpy as np
import pytest

from gae_forge.flows import (IafChain, MafModel, PlanarFlow, RadialFlow,
                             build_flow_chain, flow_chain_forward,
                             flow_chain_log_density, inv_softplus,
                             parse_flow_sequence)
from gae_forge.stats import std_normal_log_density
from gae_forge.tensor import Tensor, Rng, grad_check

from conftest import numerical_jacobian, trapezoid

DIMS = (1, 2, 3, 5)


def random_planar(d, rng):
    flow = PlanarFlow(d, rng)
    flow.u.data = flow.u.data + rng.normal((d,), std=0.8)
    flow.b.data = np.asarray(rng.normal(std=0.5))
    return flow


def random_radial(d, rng):
    flow = RadialFlow(d, rng)
    flow.beta_raw.data = np.asarray(rng.normal(std=1.5))
    flow.alpha_raw.data = np.asarray(rng.normal(std=1.0))
    return flow


def logdet_vs_numeric(forward, z0):
    """|analytic - log|det J|| for one point through one transform."""
    _, ld = forward(Tensor(z0[None, :]))

    def f(z):
        out, _ = forward(Tensor(z[None, :]))
        return out.data[0]

    jac = numerical_jacobian(f, z0)
    sign, numeric = np.linalg.slogdet(jac)
    return abs(ld.data[0] - numeric)


class TestPlanar:
    def test_identity_construction(self):
        # u_hat vanishes when u = softplus^-1(1) * w / ||w||^2.
        d = 3
        flow = PlanarFlow(d, Rng(0))
        flow.u.data = inv_softplus(1.0) * flow.w.data / (flow.w.data @ flow.w.data)
        z = Rng(1).normal((4, d))
        z2, ld = flow.forward(Tensor(z))
        np.testing.assert_allclose(z2.data, z, atol=1e-12)
        np.testing.assert_allclose(ld.data, 0.0, atol=1e-12)

    @pytest.mark.parametrize("d", DIMS)
    def test_logdet_matches_numerical_jacobian(self, d):
        for trial in range(25):
            rng = Rng(d * 1000 + trial)
            flow = random_planar(d, rng)
            z0 = rng.normal((d,), std=1.5)
            assert logdet_vs_numeric(flow.forward, z0) < 1e-6

    def test_invertibility_reparameterization_property(self):
        # w.u_hat > -1 for adversarially chosen u; at raw w.u below the
        # float64 softplus resolution (~ -36) the bound saturates to exactly
        # -1 but never crosses it.
        for trial in range(50):
            rng = Rng(trial)
            d = int(rng.integers(1, 6))
            flow = PlanarFlow(d, rng)
            flow.u.data = rng.normal((d,), std=5.0)
            wu = float(flow.w.data @ flow.u_hat().data)
            assert wu > -1.0
        for trial in range(20):
            rng = Rng(1000 + trial)
            flow = PlanarFlow(4, rng)
            flow.u.data = rng.normal((4,), std=100.0)
            assert float(flow.w.data @ flow.u_hat().data) >= -1.0

    def test_param_gradients(self):
        flow = random_planar(3, Rng(9))
        z = Rng(2).normal((5, 3))

        def f(ts):
            flow.u, flow.w, flow.b = ts
            z2, ld = flow.forward(Tensor(z))
            return z2.square().sum() + ld.sum()

        err = grad_check(f, [Tensor(flow.u.data.copy()),
                             Tensor(flow.w.data.copy()),
                             Tensor(flow.b.data.copy())])
        assert err < 1e-6


class TestRadial:
    def test_beta_zero_identity(self):
        flow = RadialFlow(3, Rng(0))  # init is the exact identity
        z = Rng(1).normal((4, 3))
        z2, ld = flow.forward(Tensor(z))
        np.testing.assert_allclose(z2.data, z, atol=1e-12)
        np.testing.assert_allclose(ld.data, 0.0, atol=1e-12)

    def test_center_is_fixed_point(self):
        flow = random_radial(3, Rng(5))
        z0 = flow.z0.data[None, :].copy()
        z2, _ = flow.forward(Tensor(z0))
        np.testing.assert_allclose(z2.data, z0, atol=1e-12)

    @pytest.mark.parametrize("d", DIMS)
    def test_logdet_matches_numerical_jacobian(self, d):
        for trial in range(25):
            rng = Rng(d * 2000 + trial)
            flow = random_radial(d, rng)
            z0 = rng.normal((d,), std=1.5)
            assert logdet_vs_numeric(flow.forward, z0) < 1e-6


class TestChains:
    def test_sequence_parsing(self):
        assert parse_flow_sequence("PRPRP") == "PRPRP"
        assert parse_flow_sequence("10P") == "P" * 10
        assert parse_flow_sequence("15p") == "P" * 15
        assert parse_flow_sequence("PRPRPRPRPR") == "PRPRPRPRPR"
        with pytest.raises(ValueError):
            parse_flow_sequence("3X")

    def test_prprp_builds_five_alternating_flows(self):
        chain = build_flow_chain("PRPRP", 3, Rng(0))
        kinds = [type(f).__name__ for f in chain]
        assert kinds == ["PlanarFlow", "RadialFlow", "PlanarFlow",
                         "RadialFlow", "PlanarFlow"]

    def test_rrrrr_builds_five_radial(self):
        chain = build_flow_chain("RRRRR", 2, Rng(0))
        assert all(type(f).__name__ == "RadialFlow" for f in chain)

    def test_identity_chain_preserves_base_density(self):
        chain = build_flow_chain("RRR", 3, Rng(0))  # radial init is identity
        z0 = Tensor(Rng(1).normal((6, 3)))
        base = std_normal_log_density(z0)
        z_k, log_q = flow_chain_log_density(z0, chain, base)
        np.testing.assert_allclose(z_k.data, z0.data, atol=1e-12)
        np.testing.assert_allclose(log_q.data, base.data, atol=1e-12)

    def test_empty_chain_rejected(self):
        with pytest.raises(ValueError):
            flow_chain_log_density(Tensor(np.zeros((2, 2))), [],
                                   Tensor(np.zeros(2)))

    def test_transformed_density_integrates_to_one_1d(self):
        rng = Rng(42)
        chain = [random_planar(1, rng.child(i)) for i in range(3)]
        grid = np.linspace(-9.0, 9.0, 4001)[:, None]
        z0 = Tensor(grid)
        base = std_normal_log_density(z0)
        z_k, log_q = flow_chain_log_density(z0, chain, base)
        xs = z_k.data[:, 0]
        order = np.argsort(xs)
        total = trapezoid(np.exp(log_q.data[order]), xs[order])
        assert total == pytest.approx(1.0, abs=1e-4)


class TestIaf:
    def test_saturated_gate_gives_identity(self):
        # Zero weights, scale bias large enough that sigmoid rounds to 1.
        chain = IafChain(3, 2, hidden_size=8, rng=Rng(0))
        for name, p in chain.named_parameters().items():
            p.data = np.zeros_like(p.data)
            if name.endswith("bias") and p.data.shape == (6,):
                p.data = np.concatenate([np.zeros(3), np.full(3, 40.0)])
        z = Rng(1).normal((4, 3))
        z2, ld = chain.forward(Tensor(z))
        np.testing.assert_allclose(z2.data, z, atol=1e-14)
        np.testing.assert_allclose(ld.data, 0.0, atol=1e-14)

    @pytest.mark.parametrize("d", DIMS)
    def test_logdet_matches_numerical_jacobian(self, d):
        for trial in range(25):
            rng = Rng(d * 3000 + trial)
            chain = IafChain(d, 2, hidden_size=8, rng=rng)
            z0 = rng.normal((d,))
            assert logdet_vs_numeric(chain.forward, z0) < 1e-5

    def test_jacobian_triangular_under_ordering(self):
        d = 3
        chain = IafChain(d, 1, hidden_size=8, rng=Rng(7))  # natural ordering
        z0 = Rng(8).normal((d,))

        def f(z):
            out, _ = chain.forward(Tensor(z[None, :]))
            return out.data[0]

        jac = numerical_jacobian(f, z0)
        for i in range(d):
            for j in range(d):
                if j > i:
                    assert abs(jac[i, j]) < 1e-8

    def test_default_benchmark_architecture(self):
        chain = IafChain(4, 2, hidden_size=32, n_hidden=2, rng=Rng(0))
        first = chain.blocks[0].layers[0]
        assert first.weight.shape == (32, 4)
        assert chain.blocks[0].ordering == "natural"
        assert chain.blocks[1].ordering == "reversed"


class TestMaf:
    def test_zero_weights_is_standard_normal(self):
        model = MafModel(3, n_blocks=2, hidden_sizes=(16, 16), rng=Rng(0))
        for p in model.named_parameters().values():
            p.data = np.zeros_like(p.data)
        x = Rng(1).normal((6, 3))
        lp = model.log_prob(Tensor(x)).data
        want = -0.5 * (x ** 2 + np.log(2 * np.pi)).sum(axis=1)
        np.testing.assert_allclose(lp, want, atol=1e-12)

    def test_sample_to_noise_round_trip(self):
        model = MafModel(3, n_blocks=2, hidden_sizes=(16, 16), rng=Rng(5))
        n = 20
        samples = model.sample(n, Rng(9))
        u, _ = model.forward_to_noise(Tensor(samples))
        base = Rng(9).normal((n, 3))
        assert np.abs(u.data - base).max() < 1e-8

    @pytest.mark.parametrize("d", DIMS)
    def test_logdet_matches_numerical_jacobian(self, d):
        for trial in range(25):
            rng = Rng(d * 4000 + trial)
            model = MafModel(d, n_blocks=2, hidden_sizes=(8,), rng=rng)

            def forward(z):
                return model.forward_to_noise(z)

            z0 = rng.normal((d,))
            assert logdet_vs_numeric(forward, z0) < 1e-5

    def test_density_integrates_to_one_2d(self):
        model = MafModel(2, n_blocks=2, hidden_sizes=(8,), rng=Rng(3))
        lin = np.linspace(-6.5, 6.5, 161)
        xx, yy = np.meshgrid(lin, lin)
        pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
        lp = model.log_prob(Tensor(pts)).data.reshape(xx.shape)
        inner = np.array([trapezoid(np.exp(row), lin) for row in lp])
        total = trapezoid(inner, lin)
        assert total == pytest.approx(1.0, abs=1e-3)

    def test_fit_beats_single_gaussian_on_mixture(self):
        from gae_forge.samplers import SamplerConfig, fit_sampler
        from gae_forge.models import ModelConfig, build_model

        rng = Rng(21)
        a = rng.normal((260, 2)) * 0.5 + np.array([-3.0, 0.0])
        b = rng.normal((260, 2)) * 0.5 + np.array([3.0, 0.0])
        data = np.concatenate([a, b])
        perm = rng.permutation(len(data))
        train, held = data[perm[:400]], data[perm[400:]]

        cfg = SamplerConfig(kind="maf", maf={
            "n_blocks": 2, "hidden_sizes": [32, 32], "num_epochs": 120,
            "learning_rate": 3e-3, "batch_size": 100})
        dummy = build_model(ModelConfig(kind="ae", input_dim=(2, 1),
                                        latent_dim=2, hidden_dims=(4,)), 0)
        state = fit_sampler("maf", dummy, train, held, Rng(0), cfg)
        maf_ll = float(state.latent_log_density(held).mean())

        mean = train.mean(axis=0)
        cov = np.cov(train, rowvar=False)
        diff = held - mean
        inv = np.linalg.inv(cov)
        gauss_ll = float(np.mean(
            -0.5 * (2 * np.log(2 * np.pi) + np.log(np.linalg.det(cov))
                    + np.einsum("ni,ij,nj->n", diff, inv, diff))))
        assert maf_ll > gauss_ll
