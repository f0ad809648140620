"""Audio/visual feature extraction and the synthetic ground-truth corpus."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from scipy.signal import get_window

from .container import read_tensor, write_json, write_tensor
from .errors import ConfigurationError, InvalidInputError

SAMPLE_RATE = 16000
WINDOW_LENGTH = 1024
SPECTRAL_FLOOR = 1e-10

# raw-like synthetic data geometry
RAW_IMAGE_SIDE = 16
RAW_SPECTRUM_BINS = 65


@dataclass
class RawAVSequence:
    waveform: np.ndarray
    frames: list
    fps: float = 30.0
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.waveform = np.asarray(self.waveform, dtype=np.float64)
        for frame in self.frames:
            arr = np.asarray(frame)
            if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
                raise InvalidInputError("pixel values must be finite and lie in [0, 1]")
        audio_dur = len(self.waveform) / self.sample_rate
        video_dur = len(self.frames) / self.fps
        if abs(audio_dur - video_dur) > 1.0 / self.fps:
            raise InvalidInputError(
                f"audio ({audio_dur:.3f}s) and video ({video_dur:.3f}s) durations differ by more than a frame"
            )


@dataclass
class AVFeatureSequence:
    x_a: np.ndarray
    x_v: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_a = np.asarray(self.x_a, dtype=np.float32)
        self.x_v = np.asarray(self.x_v, dtype=np.float32)
        if self.x_a.ndim != 2 or self.x_v.ndim != 2:
            raise InvalidInputError("x_a and x_v must be T x d matrices")
        if self.x_a.shape[0] != self.x_v.shape[0]:
            raise InvalidInputError(
                f"x_a has {self.x_a.shape[0]} frames but x_v has {self.x_v.shape[0]}"
            )
        if not (np.all(np.isfinite(self.x_a)) and np.all(np.isfinite(self.x_v))):
            raise InvalidInputError("feature sequences must be finite")

    @property
    def T(self) -> int:
        return self.x_a.shape[0]


@dataclass
class SyntheticFactorSpec:
    n_identities: int = 10
    n_classes: int = 8
    dim_shared_dyn: int = 2
    dim_audio_dyn: int = 1
    dim_visual_dyn: int = 1
    d_a: Optional[int] = None
    d_v: Optional[int] = None
    T: int = 30
    noise_std: float = 0.05
    mode: str = "feature"
    seed: int = 0
    n_sequences: int = 200
    step_std: float = 0.1
    static_dim: int = 4

    def __post_init__(self):
        if self.mode not in ("feature", "raw-like"):
            raise ConfigurationError(f"mode must be 'feature' or 'raw-like', got {self.mode!r}")
        if self.mode == "raw-like":
            want = (RAW_SPECTRUM_BINS, RAW_IMAGE_SIDE * RAW_IMAGE_SIDE)
            if self.d_a is None:
                self.d_a = want[0]
            if self.d_v is None:
                self.d_v = want[1]
            if (self.d_a, self.d_v) != want:
                raise ConfigurationError(f"raw-like mode requires (d_a, d_v) = {want}")
        else:
            self.d_a = 64 if self.d_a is None else self.d_a
            self.d_v = 128 if self.d_v is None else self.d_v
        for name in ("n_identities", "n_classes", "dim_shared_dyn", "dim_audio_dyn",
                     "dim_visual_dyn", "d_a", "d_v", "T", "n_sequences", "static_dim"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.noise_std < 0:
            raise ConfigurationError("noise_std must be >= 0")
        if self.step_std <= 0:
            raise ConfigurationError("step_std must be > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticFactorSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown SyntheticFactorSpec fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class GroundTruthFactors:
    s_id: int
    s_cls: int
    c: np.ndarray
    a: np.ndarray
    v: np.ndarray

    def to_dict(self) -> dict:
        return {
            "s_id": int(self.s_id),
            "s_cls": int(self.s_cls),
            "c": np.asarray(self.c).tolist(),
            "a": np.asarray(self.a).tolist(),
            "v": np.asarray(self.v).tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GroundTruthFactors":
        return cls(
            s_id=int(data["s_id"]),
            s_cls=int(data["s_cls"]),
            c=np.asarray(data["c"], dtype=np.float64),
            a=np.asarray(data["a"], dtype=np.float64),
            v=np.asarray(data["v"], dtype=np.float64),
        )


@dataclass
class SyntheticCorpus:
    sequences: list
    spec: SyntheticFactorSpec

    def __len__(self):
        return len(self.sequences)

    def features(self):
        return [seq for seq, _ in self.sequences]

    def factors(self):
        return [fac for _, fac in self.sequences]

    def stacked(self):
        """Return (x_a, x_v) as N x T x d float32 arrays."""
        x_a = np.stack([s.x_a for s, _ in self.sequences])
        x_v = np.stack([s.x_v for s, _ in self.sequences])
        return x_a, x_v

    def labels(self, kind: str = "s_cls") -> np.ndarray:
        return np.array([getattr(f, kind) for _, f in self.sequences], dtype=np.int64)

    def subset(self, indices) -> "SyntheticCorpus":
        return SyntheticCorpus([self.sequences[i] for i in indices], self.spec)


# --------------------------------------------------------------------------- audio


def stft_power_spectrogram(waveform, sample_rate: int = SAMPLE_RATE, fps: float = 30.0,
                           window: str = "hann") -> np.ndarray:
    """Frame-synchronous power spectrogram.

    Frame ``t`` is the squared magnitude of the DFT of a 1024-sample window
    centered on sample ``round(t * sample_rate / fps)``; samples outside the
    signal are zeros. The frame count is the number of such centers that fall
    inside the waveform, so a waveform of exactly ``N`` video frames yields
    ``N`` rows.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("waveform must be one-dimensional")
    if sample_rate != SAMPLE_RATE:
        raise InvalidInputError(f"sample_rate must be {SAMPLE_RATE}, got {sample_rate}")
    if len(x) < WINDOW_LENGTH:
        raise InvalidInputError(
            f"waveform has {len(x)} samples; at least one {WINDOW_LENGTH}-sample window is required"
        )
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("waveform contains non-finite samples")

    hop = sample_rate / fps
    n_frames = int(np.ceil(len(x) / hop))
    centers = np.round(np.arange(n_frames) * hop).astype(np.int64)
    centers = centers[centers < len(x)]

    half = WINDOW_LENGTH // 2
    padded = np.concatenate([np.zeros(half), x, np.zeros(half)])
    # window for frame t covers [center - half, center + half)
    idx = centers[:, None] + np.arange(WINDOW_LENGTH)[None, :]
    segments = padded[idx] * get_window(window, WINDOW_LENGTH, fftbins=True)[None, :]
    power = np.abs(np.fft.rfft(segments, axis=1)) ** 2
    return np.maximum(power, SPECTRAL_FLOOR)


# --------------------------------------------------------------------------- video


def preprocess_frames(frames, target=(64, 64)) -> np.ndarray:
    """Resize pre-cropped RGB frames bilinearly and flatten channel-major."""
    if frames is None or len(frames) == 0:
        raise InvalidInputError("frame list is empty")
    out = []
    for i, frame in enumerate(frames):
        arr = np.asarray(frame, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise InvalidInputError(f"frame {i} must be H x W x 3, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise InvalidInputError(f"frame {i} contains non-finite pixels")
        if arr.min() < 0 or arr.max() > 1:
            raise InvalidInputError(f"frame {i} has pixels outside [0, 1]")
        chw = torch.from_numpy(arr.transpose(2, 0, 1).copy())[None]
        if tuple(arr.shape[:2]) != tuple(target):
            chw = F.interpolate(chw, size=tuple(target), mode="bilinear", align_corners=False)
        out.append(chw[0].clamp(0.0, 1.0).reshape(-1).numpy())
    return np.stack(out)


# --------------------------------------------------------------------------- synthetic corpus


def _smooth_field(rng, shape, sigma):
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    return f / (f.std() + 1e-12)


def _bounded_walk(rng, T, dim, step_std):
    steps = np.clip(rng.normal(0.0, step_std, size=(T, dim)), -3 * step_std, 3 * step_std)
    steps[0] = 0.0
    walk = np.cumsum(steps, axis=0)
    # zero time-average keeps every per-sequence constant in the static factors
    walk -= walk.mean(axis=0, keepdims=True)
    return np.clip(walk, -1.0, 1.0)


def raw_boxes(side: int = RAW_IMAGE_SIDE):
    """Mouth and eye boxes for the raw-like images, scaled from 64 x 64."""
    s = side / 64.0
    mouth = (int(40 * s), int(np.ceil(60 * s)), int(18 * s), int(np.ceil(46 * s)))
    eyes = (int(16 * s), int(np.ceil(32 * s)), int(10 * s), int(np.ceil(54 * s)))
    return {"mouth": mouth, "eyes": eyes}


class SyntheticGenerator:
    """Fixed random maps from ground-truth factors to observations.

    All maps are a pure function of ``spec.seed``; per-sequence randomness comes
    from a separate child seed so sequences can be generated independently.
    """

    # sin-nonlinearity amplitude relative to the linear part
    nonlin = 0.3

    def __init__(self, spec: SyntheticFactorSpec):
        self.spec = spec
        root = np.random.SeedSequence(spec.seed)
        map_ss, self._seq_ss = root.spawn(2)
        rng = np.random.default_rng(map_ss)
        k = spec.static_dim
        self.emb_id = rng.standard_normal((spec.n_identities, k))
        self.emb_cls = rng.standard_normal((spec.n_classes, k)) * 1.5
        if spec.mode == "feature":
            self._build_feature_maps(rng)
        else:
            self._build_raw_maps(rng)

    # ---- feature mode
    def _build_feature_maps(self, rng):
        s = self.spec
        k2 = 2 * s.static_dim
        da_in = s.dim_shared_dyn + s.dim_audio_dyn
        dv_in = s.dim_shared_dyn + s.dim_visual_dyn
        self.static_a = rng.normal(0, 1 / np.sqrt(k2), (s.d_a, k2))
        self.static_v = rng.normal(0, 1 / np.sqrt(k2), (s.d_v, k2))
        self.bias_a = rng.normal(0, 0.1, s.d_a)
        self.bias_v = rng.normal(0, 0.1, s.d_v)
        self.lin_a = rng.normal(0, 1.5, (s.d_a, da_in))
        self.lin_v = rng.normal(0, 1.5, (s.d_v, dv_in))
        self.freq_a = rng.normal(0, 2.0, (s.d_a, da_in))
        self.freq_v = rng.normal(0, 2.0, (s.d_v, dv_in))

    # ---- raw-like mode
    def _build_raw_maps(self, rng):
        s = self.spec
        side = RAW_IMAGE_SIDE
        k = s.static_dim
        boxes = raw_boxes(side)
        mouth = np.zeros((side, side))
        r0, r1, c0, c1 = boxes["mouth"]
        mouth[r0:r1, c0:c1] = 1.0
        eyes = np.zeros((side, side))
        r0, r1, c0, c1 = boxes["eyes"]
        eyes[r0:r1, c0:c1] = 1.0
        self.face_id = np.stack([_smooth_field(rng, (side, side), 2.0) for _ in range(k)])
        self.face_cls = np.stack([_smooth_field(rng, (side, side), 1.5) for _ in range(k)])
        self.mouth_patterns = np.stack(
            [mouth * (0.6 + 0.4 * np.abs(_smooth_field(rng, (side, side), 1.0)))
             * (1 if i % 2 == 0 else -1) for i in range(s.dim_shared_dyn)]
        )
        self.eye_patterns = np.stack(
            [eyes * (0.6 + 0.4 * np.abs(_smooth_field(rng, (side, side), 1.0)))
             * (1 if i % 2 == 0 else -1) for i in range(s.dim_visual_dyn)]
        )
        bins = RAW_SPECTRUM_BINS
        self.env_id = np.stack([_smooth_field(rng, (bins,), 4.0) for _ in range(k)])
        self.env_cls = np.stack([_smooth_field(rng, (bins,), 3.0) for _ in range(k)])
        da_in = s.dim_shared_dyn + s.dim_audio_dyn
        self.spec_lin = np.stack([_smooth_field(rng, (bins,), 2.0) for _ in range(da_in)])
        self.spec_freq = rng.normal(0, 2.0, (bins, da_in))
        self.spec_tilt = -np.linspace(0.0, 4.0, bins)

    def sample_factors(self, rng) -> GroundTruthFactors:
        s = self.spec
        return GroundTruthFactors(
            s_id=int(rng.integers(s.n_identities)),
            s_cls=int(rng.integers(s.n_classes)),
            c=_bounded_walk(rng, s.T, s.dim_shared_dyn, s.step_std),
            a=_bounded_walk(rng, s.T, s.dim_audio_dyn, s.step_std),
            v=_bounded_walk(rng, s.T, s.dim_visual_dyn, s.step_std),
        )

    def render(self, factors: GroundTruthFactors, rng=None, noise_std=None):
        """Map ground-truth factors to (x_a, x_v); noise drawn from ``rng``."""
        s = self.spec
        noise_std = s.noise_std if noise_std is None else noise_std
        if rng is None:
            rng = np.random.default_rng(0)
        e_id = self.emb_id[factors.s_id]
        e_cls = self.emb_cls[factors.s_cls]
        ca = np.concatenate([factors.c, factors.a], axis=1)
        cv = np.concatenate([factors.c, factors.v], axis=1)
        T = ca.shape[0]
        if s.mode == "feature":
            emb = np.concatenate([e_id, e_cls])
            x_a = (self.static_a @ emb + self.bias_a)[None] + ca @ self.lin_a.T \
                + self.nonlin * np.sin(ca @ self.freq_a.T)
            x_v = (self.static_v @ emb + self.bias_v)[None] + cv @ self.lin_v.T \
                + self.nonlin * np.sin(cv @ self.freq_v.T)
            x_a = x_a + noise_std * rng.standard_normal(x_a.shape)
            x_v = x_v + noise_std * rng.standard_normal(x_v.shape)
        else:
            face = 0.5 * np.tensordot(e_id, self.face_id, 1) + 0.5 * np.tensordot(e_cls, self.face_cls, 1)
            logits = face[None] \
                + 4.0 * np.tensordot(factors.c, self.mouth_patterns, 1) \
                + 4.0 * np.tensordot(factors.v, self.eye_patterns, 1)
            img = 1.0 / (1.0 + np.exp(-logits))
            img = np.clip(img + noise_std * rng.standard_normal(img.shape), 0.0, 1.0)
            x_v = img.reshape(T, -1)
            env = 0.6 * (e_id @ self.env_id) + 0.6 * (e_cls @ self.env_cls) + self.spec_tilt
            log_p = env[None] + 1.5 * (ca @ self.spec_lin) + self.nonlin * np.sin(ca @ self.spec_freq.T)
            log_p = log_p + noise_std * rng.standard_normal(log_p.shape)
            x_a = np.maximum(np.exp(log_p), SPECTRAL_FLOOR)
        return x_a.astype(np.float32), x_v.astype(np.float32)

    def sequence_rngs(self, n):
        return [np.random.default_rng(ss) for ss in self._seq_ss.spawn(n)]


def generate_synthetic(spec: SyntheticFactorSpec) -> SyntheticCorpus:
    gen = SyntheticGenerator(spec)
    sequences = []
    for i, rng in enumerate(gen.sequence_rngs(spec.n_sequences)):
        factors = gen.sample_factors(rng)
        x_a, x_v = gen.render(factors, rng)
        meta = {"id": f"seq{i:05d}", "s_id": factors.s_id, "s_cls": factors.s_cls}
        sequences.append((AVFeatureSequence(x_a, x_v, meta), factors))
    return SyntheticCorpus(sequences, spec)


# --------------------------------------------------------------------------- corpus on disk


def save_corpus(corpus: SyntheticCorpus, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_json(path / "spec.json", corpus.spec.to_dict())
    for seq, factors in corpus.sequences:
        sub = path / seq.meta["id"]
        write_tensor(sub / "x_a.ten", seq.x_a)
        write_tensor(sub / "x_v.ten", seq.x_v)
        write_json(sub / "factors.json", factors.to_dict())
    return path


def load_corpus(path) -> SyntheticCorpus:
    path = Path(path)
    spec_file = path / "spec.json"
    if not spec_file.is_file():
        raise ConfigurationError(f"no corpus at {path}: spec.json missing")
    spec = SyntheticFactorSpec.from_dict(json.loads(spec_file.read_text()))
    sequences = []
    for sub in sorted(p for p in path.iterdir() if p.is_dir()):
        factors = GroundTruthFactors.from_dict(json.loads((sub / "factors.json").read_text()))
        meta = {"id": sub.name, "s_id": factors.s_id, "s_cls": factors.s_cls}
        seq = AVFeatureSequence(read_tensor(sub / "x_a.ten"), read_tensor(sub / "x_v.ten"), meta)
        sequences.append((seq, factors))
    return SyntheticCorpus(sequences, spec)
