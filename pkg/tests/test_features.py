import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.signal import get_window

from vqmdvae.errors import ConfigurationError, InvalidInputError
from vqmdvae.features import (SPECTRAL_FLOOR, WINDOW_LENGTH, AVFeatureSequence, RawAVSequence,
                              SyntheticFactorSpec, SyntheticGenerator, generate_synthetic,
                              load_corpus, preprocess_frames, save_corpus, stft_power_spectrogram)


# ---------------------------------------------------------------- spectrogram

def test_zero_waveform_hits_floor():
    s = stft_power_spectrogram(np.zeros(16000))
    assert s.shape == (30, WINDOW_LENGTH // 2 + 1)
    assert np.all(s == SPECTRAL_FLOOR)


def test_hop_matches_video_rate():
    # 64 ms window; one spectrogram row per video frame at 30 fps
    assert WINDOW_LENGTH / 16000 == pytest.approx(0.064)
    assert 16000 / 30 == pytest.approx(533.333, abs=1e-3)
    for n_frames in (2, 7, 30, 31):
        n = int(round(n_frames * 16000 / 30))
        assert stft_power_spectrogram(np.full(n, 0.1)).shape[0] == n_frames


def test_sine_peak_matches_direct_dft():
    k = 37
    t = np.arange(16000)
    x = np.sin(2 * np.pi * k * t / WINDOW_LENGTH)
    s = stft_power_spectrogram(x, window="boxcar")
    # interior frame: oracle is the direct DFT of the rectangular segment
    frame = 10
    c = int(round(frame * 16000 / 30))
    seg = x[c - WINDOW_LENGTH // 2:c + WINDOW_LENGTH // 2]
    n = np.arange(WINDOW_LENGTH)
    oracle = np.array([abs(np.sum(seg * np.exp(-2j * np.pi * b * n / WINDOW_LENGTH))) ** 2
                       for b in range(WINDOW_LENGTH // 2 + 1)])
    assert np.argmax(s[frame]) == k
    np.testing.assert_allclose(s[frame], np.maximum(oracle, SPECTRAL_FLOOR), rtol=1e-6, atol=1e-6)


def test_hann_window_is_periodic():
    w = get_window("hann", WINDOW_LENGTH, fftbins=True)
    assert w[0] == 0 and w[WINDOW_LENGTH // 2] == pytest.approx(1.0)


@given(st.integers(1024, 6000), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=25, deadline=None)
def test_spectrogram_floor_and_frame_count(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    s = stft_power_spectrogram(x)
    assert np.all(s >= SPECTRAL_FLOOR)
    assert abs(s.shape[0] - n / (16000 / 30)) <= 1


def test_spectrogram_errors():
    with pytest.raises(InvalidInputError):
        stft_power_spectrogram(np.zeros(500))
    with pytest.raises(InvalidInputError):
        stft_power_spectrogram(np.zeros(4000), sample_rate=8000)


# ---------------------------------------------------------------- frames

def test_identity_resize():
    rng = np.random.default_rng(0)
    f = rng.random((64, 64, 3))
    out = preprocess_frames([f])
    np.testing.assert_allclose(out[0], f.transpose(2, 0, 1).ravel(), atol=1e-12)


def test_constant_gray_preserved():
    out = preprocess_frames([np.full((128, 128, 3), 0.37)])
    np.testing.assert_allclose(out, 0.37, atol=1e-12)


def _bilinear_oracle(img, out_h, out_w):
    """Half-pixel-centered bilinear resize with edge clamping."""
    h, w = img.shape
    res = np.zeros((out_h, out_w))
    for i in range(out_h):
        y = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(np.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(out_w):
            x = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(np.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            res[i, j] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return res


def test_white_pixel_downscale_matches_oracle():
    img = np.zeros((128, 128, 3))
    img[37, 90] = 1.0
    out = preprocess_frames([img])[0].reshape(3, 64, 64)
    oracle = _bilinear_oracle(img[:, :, 0], 64, 64)
    np.testing.assert_allclose(out[0], oracle, atol=1e-12)
    assert out[0].sum() == pytest.approx(oracle.sum())


def test_frame_validation():
    with pytest.raises(InvalidInputError):
        preprocess_frames([])
    with pytest.raises(InvalidInputError):
        preprocess_frames([np.full((8, 8, 3), 1.5)])
    with pytest.raises(InvalidInputError):
        RawAVSequence(np.zeros(16000), [np.zeros((4, 4, 3))] * 10)


def test_feature_sequence_validation():
    with pytest.raises(InvalidInputError):
        AVFeatureSequence(np.zeros((3, 2)), np.zeros((4, 2)))
    with pytest.raises(InvalidInputError):
        AVFeatureSequence(np.full((3, 2), np.nan), np.zeros((3, 2)))


# ---------------------------------------------------------------- synthetic corpus

SMALL = dict(n_sequences=12, T=12)


def test_generation_is_deterministic():
    a = generate_synthetic(SyntheticFactorSpec(**SMALL))
    b = generate_synthetic(SyntheticFactorSpec(**SMALL))
    for (sa, fa), (sb, fb) in zip(a.sequences, b.sequences):
        assert np.array_equal(sa.x_a, sb.x_a) and np.array_equal(sa.x_v, sb.x_v)
        assert np.array_equal(fa.c, fb.c)
    c = generate_synthetic(SyntheticFactorSpec(**SMALL, seed=1))
    assert not np.array_equal(a.sequences[0][0].x_v, c.sequences[0][0].x_v)


def test_default_dims():
    spec = SyntheticFactorSpec()
    assert (spec.d_a, spec.d_v, spec.T, spec.n_sequences) == (64, 128, 30, 200)
    raw = SyntheticFactorSpec(mode="raw-like")
    assert (raw.d_a, raw.d_v) == (65, 256)
    with pytest.raises(ConfigurationError):
        SyntheticFactorSpec(mode="raw-like", d_v=100)
    with pytest.raises(ConfigurationError):
        SyntheticFactorSpec.from_dict({"bogus": 1})


def _r2(x, y):
    x1 = np.c_[x, np.ones(len(x))]
    coef, *_ = np.linalg.lstsq(x1, y, rcond=None)
    resid = y - x1 @ coef
    return 1 - (resid ** 2).sum() / ((y - y.mean(0)) ** 2).sum()


@pytest.mark.parametrize("mode", ["feature", "raw-like"])
def test_clean_factors_identifiable(mode):
    corpus = generate_synthetic(SyntheticFactorSpec(mode=mode, noise_std=0.0, n_sequences=40))
    x_a, x_v = corpus.stacked()
    if mode == "raw-like":
        x_a = np.log(x_a)
    x = np.concatenate([x_a, x_v], -1).reshape(-1, x_a.shape[-1] + x_v.shape[-1])
    for name in ("c", "a", "v"):
        y = np.concatenate([getattr(f, name) for f in corpus.factors()])
        r2 = _r2(x, y)
        assert r2 >= (0.99 if name == "c" else 0.95), (name, r2)


def test_identity_changes_mean_not_increments():
    spec = SyntheticFactorSpec(noise_std=0.0)
    gen = SyntheticGenerator(spec)
    rng = np.random.default_rng(3)
    f1 = gen.sample_factors(rng)
    f2 = type(f1).from_dict({**f1.to_dict(), "s_id": (f1.s_id + 1) % spec.n_identities})
    _, v1 = gen.render(f1, np.random.default_rng(0))
    _, v2 = gen.render(f2, np.random.default_rng(0))
    assert not np.allclose(v1.mean(0), v2.mean(0))
    np.testing.assert_allclose(np.diff(v1, axis=0), np.diff(v2, axis=0), atol=1e-5)


def test_corpus_round_trip(tmp_path):
    corpus = generate_synthetic(SyntheticFactorSpec(**SMALL))
    save_corpus(corpus, tmp_path / "c")
    back = load_corpus(tmp_path / "c")
    assert back.spec == corpus.spec
    for (sa, fa), (sb, fb) in zip(corpus.sequences, back.sequences):
        assert np.array_equal(sa.x_a, sb.x_a) and np.array_equal(sa.x_v, sb.x_v)
        assert fa.s_cls == fb.s_cls and np.array_equal(fa.c, fb.c)
    with pytest.raises(ConfigurationError):
        load_corpus(tmp_path / "missing")
