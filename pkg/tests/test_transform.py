import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vqmdvae.errors import ConfigurationError, InvalidInputError
from vqmdvae.eval.metrics import RegionBox
from vqmdvae.features import AVFeatureSequence, SyntheticFactorSpec, generate_synthetic
from vqmdvae.mdvae import MDVAE, LatentBundle, ModelConfig
from vqmdvae.train import FeatureEncoder, TrainConfig, train_stage1, vq_from_checkpoint
from vqmdvae.transform import (Pipeline, SwapSpec, analyze, analyze_batch, corrupt, denoise, interpolate_w,
                               resynthesize, resynthesize_batch, swap)


def _bundle(seed, T=5, with_specific=True):
    r = np.random.default_rng(seed)
    return LatentBundle(r.normal(size=84), r.normal(size=(T, 16)),
                        r.normal(size=(T, 8)) if with_specific else None,
                        r.normal(size=(T, 8)) if with_specific else None)


def _eq(a, b):
    return all((getattr(a, n) is None and getattr(b, n) is None) or np.array_equal(getattr(a, n), getattr(b, n))
               for n in ("w", "z_av", "z_a", "z_v"))


SUBSETS = st.sets(st.sampled_from(["W", "ZAV", "ZA", "ZV"]), min_size=1)


@given(SUBSETS, st.integers(0, 1000), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_swap_algebra(subset, sa, sb):
    a, b = _bundle(sa), _bundle(sb + 1001)
    spec = SwapSpec(subset)
    assert _eq(swap(a, a, spec), a)
    assert _eq(swap(swap(a, b, spec), a, spec), a)
    out = swap(a, b, spec)
    for key, name in (("W", "w"), ("ZAV", "z_av"), ("ZA", "z_a"), ("ZV", "z_v")):
        src = b if key in spec.subset else a
        assert np.array_equal(getattr(out, name), getattr(src, name))


def test_swap_w_definition_and_errors():
    a, b = _bundle(0), _bundle(1, T=7)
    out = swap(a, b, SwapSpec({"W"}))
    assert np.array_equal(out.w, b.w) and np.array_equal(out.z_av, a.z_av)
    with pytest.raises(InvalidInputError):
        swap(a, b, SwapSpec({"ZAV"}))
    with pytest.raises(InvalidInputError):
        SwapSpec(set())
    with pytest.raises(InvalidInputError):
        SwapSpec({"Q"})


def test_interpolate_w():
    w1, w2 = np.arange(84.0), -np.arange(84.0)
    assert np.array_equal(interpolate_w(w1, w2, 0.0), w1)
    assert np.array_equal(interpolate_w(w1, w2, 1.0), w2)
    assert np.array_equal(interpolate_w(w1, w2, 0.5), np.zeros(84))
    with pytest.raises(InvalidInputError):
        interpolate_w(w1, w2, 1.5)


@pytest.fixture(scope="module")
def full_model():
    torch.manual_seed(0)
    return MDVAE(ModelConfig()).eval()


def test_analyze_full_dims(full_model):
    rng = np.random.default_rng(0)
    seq = AVFeatureSequence(rng.normal(size=(6, 512)), rng.random((6, 2048)))
    b1 = analyze(seq, full_model)
    b2 = analyze(seq, full_model)
    assert _eq(b1, b2)
    assert b1.w.shape == (84,) and b1.z_av.shape == (6, 16) and b1.z_a.shape == (6, 8) and b1.z_v.shape == (6, 8)
    out = resynthesize(b1, full_model)
    assert out.x_a.shape == (6, 512) and out.x_v.shape == (6, 2048)
    assert np.array_equal(out.x_v, resynthesize(b1, full_model).x_v)
    with pytest.raises(InvalidInputError):
        analyze(AVFeatureSequence(np.zeros((6, 500)), np.zeros((6, 2048))), full_model)
    with pytest.raises(ConfigurationError):
        resynthesize(b1, full_model, mode="raw")


def test_raw_resynthesis_full_visual_stack():
    from vqmdvae.checkpoint import make_checkpoint
    from vqmdvae.vq import VQVAE, VQConfig

    vq_v, vq_a = VQVAE(VQConfig.visual()), VQVAE(VQConfig.audio())
    torch.manual_seed(1)
    model = MDVAE(ModelConfig(d_a=512, d_v=2048))
    pipe = Pipeline(model, FeatureEncoder(vq_a, vq_v))
    out = resynthesize(_bundle(3, T=2), pipe, mode="raw")
    assert out.x_v.shape == (2, 3 * 64 * 64) and out.x_a.shape == (2, 513)
    assert np.all(out.x_a > 0)


def test_analyze_resynthesize_drift():
    corpus = generate_synthetic(SyntheticFactorSpec(n_sequences=10, T=12))
    torch.manual_seed(0)
    model = MDVAE(ModelConfig(d_a=64, d_v=128))
    x_a, x_v = corpus.stacked()
    first = analyze_batch(x_a, x_v, model)
    rec = resynthesize_batch(first, model)
    second = analyze_batch(np.stack([r.x_a for r in rec]), np.stack([r.x_v for r in rec]), model)
    rec2 = resynthesize_batch(second, model)
    d1 = np.mean([np.linalg.norm(r.x_v - s.x_v) for r, s in zip(rec, corpus.features())])
    d2 = np.mean([np.linalg.norm(r2.x_v - r.x_v) for r2, r in zip(rec2, rec)])
    assert d2 < 1.5 * d1


# ---------------------------------------------------------------- corruption

@given(st.floats(0.0, 2.0), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_corrupt_support(var, seed):
    rng = np.random.default_rng(seed)
    stack = rng.random((10, 64, 64, 3))
    region = RegionBox.mouth()
    out = corrupt(stack, region, var, np.random.default_rng(seed))
    mask = np.zeros_like(stack, dtype=bool)
    mask[2:8, 40:60, 18:46] = True
    assert np.array_equal(out[~mask], stack[~mask])
    assert out.min() >= 0 and out.max() <= 1
    for f in (0, 1, 8, 9):
        assert np.array_equal(out[f], stack[f])
    if var == 0:
        assert np.array_equal(out, stack)


def test_corrupt_errors():
    with pytest.raises(InvalidInputError):
        corrupt(np.zeros((9, 16, 16)), RegionBox.mouth(16), 0.1)
    with pytest.raises(InvalidInputError):
        corrupt(np.zeros((10, 16, 16)), RegionBox.mouth(16), -1.0)
    with pytest.raises(InvalidInputError):
        corrupt(np.zeros((10, 16, 16)), RegionBox.mouth(64), 0.1)


def test_region_boxes_scale():
    assert (RegionBox.mouth().rows, RegionBox.mouth().cols) == ((40, 60), (18, 46))
    assert (RegionBox.eyes().rows, RegionBox.eyes().cols) == ((16, 32), (10, 54))
    assert (RegionBox.mouth(16).rows, RegionBox.mouth(16).cols) == ((10, 15), (4, 12))


@pytest.fixture(scope="module")
def raw_pipeline():
    corpus = generate_synthetic(SyntheticFactorSpec(mode="raw-like", n_sequences=4, T=12))
    ck_a, ck_v = train_stage1(TrainConfig(stage=1, max_steps=2, batch_size=8), corpus)
    enc = FeatureEncoder(vq_from_checkpoint(ck_a), vq_from_checkpoint(ck_v))
    x_a, x_v = corpus.stacked()
    enc.fit_scales(x_a, x_v)
    torch.manual_seed(0)
    model = MDVAE(ModelConfig.tiny(d_a=64, d_v=128)).eval()
    return corpus, Pipeline(model, enc)


def test_denoise_shapes_and_codebook_membership(raw_pipeline):
    corpus, pipe = raw_pipeline
    x_a, x_v = corpus.stacked()
    stack = x_v[0, :10].reshape(10, 16, 16)
    out = denoise(stack, x_a[0, :10], pipe)
    assert out.shape == stack.shape
    rec = resynthesize(analyze(corpus.features()[0], pipe), pipe, mode="raw")
    assert rec.x_v.shape == (12, 256) and rec.x_a.shape == (12, 65)
    # decoder inputs in raw mode are codebook members
    b = analyze(corpus.features()[0], pipe)
    t = {n: torch.as_tensor(getattr(b, n))[None] for n in ("w", "z_av", "z_a", "z_v")}
    with torch.no_grad():
        _, mean_v = pipe.mdvae.decode(t["w"], t["z_av"], t["z_a"], t["z_v"])
    vq = pipe.encoder.vq_visual
    grid = vq.unflatten(mean_v[0] * pipe.encoder.scale_v)
    zq = vq.quantize(grid).quantized.movedim(1, -1).reshape(-1, vq.cfg.D)
    assert (zq[:, None] == vq.codebook.vectors[None]).all(-1).any(1).all()


def test_denoise_clean_equals_resynthesis(raw_pipeline):
    corpus, pipe = raw_pipeline
    x_a, x_v = corpus.stacked()
    stack = x_v[1, :10].reshape(10, 16, 16)
    clean = denoise(corrupt(stack, RegionBox.mouth(16), 0.0), x_a[1, :10], pipe)
    seq10 = AVFeatureSequence(x_a[1, :10], x_v[1, :10])
    base = resynthesize(analyze(seq10, pipe), pipe, mode="raw").x_v.reshape(10, 16, 16)
    np.testing.assert_allclose(clean, base, atol=1e-6)


def test_analyze_sampling_flag():
    corpus = generate_synthetic(SyntheticFactorSpec(n_sequences=2, T=5, d_a=4, d_v=6))
    torch.manual_seed(0)
    model = MDVAE(ModelConfig.tiny()).eval()
    seq = corpus.features()[0]
    mean = analyze(seq, model)
    assert np.array_equal(analyze(seq, model).z_av, mean.z_av)
    s1 = analyze(seq, model, sample=True, generator=torch.Generator().manual_seed(1))
    s2 = analyze(seq, model, sample=True, generator=torch.Generator().manual_seed(1))
    s3 = analyze(seq, model, sample=True, generator=torch.Generator().manual_seed(2))
    assert np.array_equal(s1.w, s2.w) and np.array_equal(s1.z_v, s2.z_v)
    assert not np.array_equal(s1.w, mean.w) and not np.array_equal(s1.z_av, s3.z_av)
