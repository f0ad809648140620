import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import finite_difference_check, monte_carlo_kl
from vqmdvae.errors import ConfigurationError, InvalidInputError, NumericError
from vqmdvae.mdvae import (MDVAE, DiagGaussian, LatentBundle, ModelConfig, elbo, kl_diag_gaussian,
                           reparameterize)


def _g(mean, var):
    mean = torch.as_tensor(mean, dtype=torch.float64)
    return DiagGaussian(mean, torch.log(torch.as_tensor(var, dtype=torch.float64)))


def test_kl_closed_forms():
    assert kl_diag_gaussian(_g([0.0], [1.0]), _g([0.0], [1.0])).item() == 0.0
    assert kl_diag_gaussian(_g([1.0], [1.0]), _g([0.0], [1.0])).item() == pytest.approx(0.5, abs=1e-12)
    expect = 0.5 * (4 - 1 - math.log(4))
    assert kl_diag_gaussian(_g([0.0], [4.0]), _g([0.0], [1.0])).item() == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(0.80685, abs=1e-5)


@given(st.lists(st.tuples(st.floats(-3, 3), st.floats(0.1, 4), st.floats(-3, 3), st.floats(0.1, 4)),
                min_size=1, max_size=6))
@settings(max_examples=80, deadline=None)
def test_kl_nonnegative(rows):
    mq, vq, mp, vp = (list(c) for c in zip(*rows))
    assert kl_diag_gaussian(_g(mq, vq), _g(mp, vp)).item() >= -1e-12


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    mq, mp = rng.normal(size=4), rng.normal(size=4)
    sq, sp = rng.uniform(0.5, 1.5, 4), rng.uniform(0.5, 1.5, 4)
    analytic = kl_diag_gaussian(_g(mq, sq ** 2), _g(mp, sp ** 2)).item()
    mc = monte_carlo_kl(mq, sq, mp, sp, 200_000, rng)
    assert abs(mc - analytic) / analytic < 0.01


def test_reparameterize_examples():
    assert reparameterize(_g([0.0], [1.0]), torch.zeros(1, dtype=torch.float64)).item() == 0.0
    assert reparameterize(_g([2.0], [0.25]), torch.ones(1, dtype=torch.float64)).item() == pytest.approx(2.5)
    tight = DiagGaussian(torch.tensor([1.5]), torch.tensor([-1e6]))
    assert reparameterize(tight, torch.ones(1)).item() == pytest.approx(1.5, abs=1e-3)
    with pytest.raises(InvalidInputError):
        reparameterize(tight, torch.ones(2))


def test_kl_shape_mismatch():
    with pytest.raises(InvalidInputError):
        kl_diag_gaussian(_g([0.0], [1.0]), _g([0.0, 0.0], [1.0, 1.0]))


# ---------------------------------------------------------------- full-size geometry

@pytest.fixture(scope="module")
def full_model():
    torch.manual_seed(0)
    return MDVAE(ModelConfig()).eval()


def test_full_dims(full_model):
    m = full_model
    x_a, x_v = torch.randn(2, 5, 512), torch.rand(2, 5, 2048)
    r_a, r_v = m.embed_observations(x_a, x_v)
    assert torch.equal(r_a, x_a)
    assert r_v.shape == (2, 5, 512)
    with torch.no_grad():
        trace = m.infer(x_a, x_v, m.zero_noise(2, 5))
        assert trace.q_w.mean.shape == (2, 84) and trace.q_w.log_var.shape == (2, 84)
        assert trace.samples["z_av"].shape == (2, 5, 16)
        assert trace.samples["z_a"].shape == (2, 5, 8)
        assert trace.samples["z_v"].shape == (2, 5, 8)
        mean_a, mean_v = m.decode(trace.w, trace.samples["z_av"], trace.samples["z_a"], trace.samples["z_v"])
    assert mean_a.shape == (2, 5, 512) and mean_v.shape == (2, 5, 2048)
    # decoder inputs are concatenations: 8 + 16 + 84
    assert m.dec_a[0].in_features == 108 and m.dec_v[0].in_features == 108


def test_zero_visual_embedding_is_bias_driven(full_model):
    x = torch.zeros(1, 3, 2048)
    _, r1 = full_model.embed_observations(torch.zeros(1, 3, 512), x)
    _, r2 = full_model.embed_observations(torch.zeros(1, 3, 512), x)
    assert torch.equal(r1, r2) and torch.all(r1 >= 0)
    assert torch.allclose(r1[0, 0], r1[0, 2])


# ---------------------------------------------------------------- tiny-model structure

@pytest.fixture
def tiny():
    torch.manual_seed(0)
    return MDVAE(ModelConfig.tiny()).double()


def _data(B=3, T=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(B, T, 4, generator=g, dtype=torch.float64),
            torch.randn(B, T, 6, generator=g, dtype=torch.float64))


def test_infer_w_batch_equivariance(tiny):
    x_a, x_v = _data()
    r_a, r_v = tiny.embed_observations(x_a, x_v)
    q = tiny.infer_w(r_a, r_v)
    perm = torch.tensor([2, 0, 1])
    qp = tiny.infer_w(r_a[perm], r_v[perm])
    assert torch.allclose(qp.mean, q.mean[perm], atol=1e-12)
    q_rev = tiny.infer_w(r_a.flip(1), r_v.flip(1))
    assert not torch.allclose(q_rev.mean, q.mean)
    assert torch.equal(tiny.infer_w(r_a, r_v).mean, q.mean)


def test_first_prior_shared_across_sequences(tiny):
    x_a, x_v = _data()
    trace = tiny.infer(x_a, x_v, tiny.sample_noise(3, 4, generator=torch.Generator().manual_seed(1)))
    for n in ("z_av", "z_a", "z_v"):
        p = trace.priors[n]
        assert torch.allclose(p.mean[:, 0], p.mean[:1, 0].expand_as(p.mean[:, 0]), atol=1e-15)


def test_frozen_noise_determinism(tiny):
    x_a, x_v = _data()
    noise = tiny.sample_noise(3, 4, generator=torch.Generator().manual_seed(5))
    l1 = elbo(tiny, x_a, x_v, noise)
    l2 = elbo(tiny, x_a, x_v, noise)
    assert l1.total.item() == l2.total.item()


def test_decoder_dependency_sets(tiny):
    w = torch.randn(2, 3, dtype=torch.float64)
    z_av = torch.randn(2, 4, 2, dtype=torch.float64)
    z_a = torch.randn(2, 4, 2, dtype=torch.float64, requires_grad=True)
    z_v = torch.randn(2, 4, 2, dtype=torch.float64, requires_grad=True)
    mean_a, mean_v = tiny.decode(w, z_av, z_a, z_v)
    ga = torch.autograd.grad(mean_a.sum(), z_v, allow_unused=True)[0]
    gv = torch.autograd.grad(mean_v.sum(), z_a, allow_unused=True)[0]
    assert ga is None or torch.all(ga == 0)
    assert gv is None or torch.all(gv == 0)
    a2, _ = tiny.decode(w, z_av, z_a, z_v + 5.0)
    _, v2 = tiny.decode(w, z_av, z_a + 5.0, z_v)
    assert torch.equal(a2, mean_a) and torch.equal(v2, mean_v)


def test_w_reaches_every_frame(tiny):
    w = torch.randn(1, 3, dtype=torch.float64)
    z = [torch.randn(1, 5, 2, dtype=torch.float64) for _ in range(3)]
    a1, v1 = tiny.decode(w, *z)
    a2, v2 = tiny.decode(w + 1.0, *z)
    assert torch.all((a1 - a2).abs().sum(-1) > 0)
    assert torch.all((v1 - v2).abs().sum(-1) > 0)


def test_gaussian_loglik_at_mean():
    d = 512
    x = torch.zeros(d)
    loglik = -0.5 * ((x - x) ** 2).sum() - 0.5 * d * math.log(2 * math.pi)
    assert loglik.item() == pytest.approx(-(d / 2) * math.log(2 * math.pi))


def test_recon_zero_when_data_equals_mean(tiny):
    # with zeroed final weights the decoded mean is the final bias, whatever the latents
    with torch.no_grad():
        tiny.dec_a[-1].weight.zero_()
        tiny.dec_v[-1].weight.zero_()
    x_a = tiny.dec_a[-1].bias.detach().expand(2, 3, 4).clone()
    x_v = tiny.dec_v[-1].bias.detach().expand(2, 3, 6).clone()
    loss = elbo(tiny, x_a, x_v, generator=torch.Generator().manual_seed(0))
    assert loss.terms["recon_a"].item() == 0.0 and loss.terms["recon_v"].item() == 0.0


def test_kl_zero_when_posterior_is_prior():
    q = DiagGaussian(torch.randn(3, 5), torch.randn(3, 5))
    assert torch.all(kl_diag_gaussian(q, DiagGaussian(q.mean.clone(), q.log_var.clone())) == 0)


def test_causality(tiny):
    x_a, x_v = _data(B=1, T=6)
    noise = tiny.sample_noise(1, 6, generator=torch.Generator().manual_seed(2))
    r_a, r_v = tiny.embed_observations(x_a, x_v)
    w = torch.randn(1, 3, dtype=torch.float64)
    base = tiny.infer_dynamics(r_a, r_v, w, noise)
    xa2, xv2 = x_a.clone(), x_v.clone()
    xa2[:, 3:] += 10.0
    xv2[:, 3:] -= 7.0
    ra2, rv2 = tiny.embed_observations(xa2, xv2)
    pert = tiny.infer_dynamics(ra2, rv2, w, noise)
    for n in ("z_av", "z_a", "z_v"):
        assert torch.equal(base.posteriors[n].mean[:, :3], pert.posteriors[n].mean[:, :3])
        assert torch.equal(base.posteriors[n].log_var[:, :3], pert.posteriors[n].log_var[:, :3])
        assert not torch.equal(base.posteriors[n].mean[:, 3:], pert.posteriors[n].mean[:, 3:])


def test_generate_shapes_and_noise(tiny):
    w = torch.randn(2, 3, dtype=torch.float64)
    a1, v1, z1 = tiny.generate(w, 5, generator=torch.Generator().manual_seed(0))
    a2, v2, z2 = tiny.generate(w, 5, generator=torch.Generator().manual_seed(1))
    assert a1.shape == (2, 5, 4) and v1.shape == (2, 5, 6)
    assert z1["z_av"].shape == (2, 5, 2) and z1["z_a"].shape == (2, 5, 2)
    assert not torch.equal(z1["z_av"], z2["z_av"])
    fixed = tiny.sample_noise(2, 5, generator=torch.Generator().manual_seed(3))
    assert torch.equal(tiny.generate(w, 5, noise=fixed)[0], tiny.generate(w, 5, noise=fixed)[0])


def test_gradient_check_tiny(tiny):
    x_a, x_v = _data(B=2, T=3)
    noise = tiny.sample_noise(2, 3, generator=torch.Generator().manual_seed(0))
    worst, _ = finite_difference_check(tiny, lambda: elbo(tiny, x_a, x_v, noise).total)
    assert worst < 1e-4


def test_unimodal_structure():
    m = MDVAE(ModelConfig.tiny(modalities="visual"))
    assert not hasattr(m, "z_a") and not hasattr(m, "dec_a")
    loss = elbo(m, None, torch.randn(2, 3, 6))
    assert loss.weights["recon_a"] == 0.0 and loss.terms["kl_a"].item() == 0.0


def test_multi_sample_elbo_averages():
    torch.manual_seed(0)
    m = MDVAE(ModelConfig.tiny())
    x_a, x_v = torch.randn(2, 3, 4), torch.randn(2, 3, 6)
    g = torch.Generator().manual_seed(0)
    avg = elbo(m, x_a, x_v, generator=g, n_samples=4)
    g = torch.Generator().manual_seed(0)
    singles = [elbo(m, x_a, x_v, generator=g).total.item() for _ in range(4)]
    assert avg.total.item() == pytest.approx(np.mean(singles), rel=1e-6)


def test_errors():
    m = MDVAE(ModelConfig.tiny())
    with pytest.raises(InvalidInputError):
        m.embed_observations(torch.randn(1, 3, 5), torch.randn(1, 3, 6))
    with pytest.raises(ConfigurationError):
        ModelConfig(modalities="both")
    with pytest.raises(NumericError):
        elbo(m, torch.full((1, 3, 4), float("nan")), torch.randn(1, 3, 6))
    with pytest.raises(InvalidInputError):
        LatentBundle(np.zeros(3), np.zeros((4, 2)), np.zeros((3, 2)))
