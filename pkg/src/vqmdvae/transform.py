"""Analysis-transformation-synthesis in the MDVAE latent space, and denoising."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint
from .errors import ConfigurationError, InvalidInputError
from .eval.metrics import RegionBox
from .features import AVFeatureSequence
from .mdvae import MDVAE, LatentBundle
from .train import FeatureEncoder, mdvae_from_checkpoint, vq_from_checkpoint

LATENT_NAMES = {"W": "w", "ZAV": "z_av", "ZA": "z_a", "ZV": "z_v"}
CORRUPTED_FRAMES = slice(2, 8)
STACK_LENGTH = 10
VARIANCE_SWEEP = (0.05, 0.1, 0.25, 0.5, 1.0)


@dataclass(frozen=True)
class SwapSpec:
    subset: frozenset

    def __init__(self, subset):
        subset = frozenset(s.upper() for s in ([subset] if isinstance(subset, str) else subset))
        if not subset:
            raise InvalidInputError("swap subset must not be empty")
        unknown = subset - set(LATENT_NAMES)
        if unknown:
            raise InvalidInputError(f"unknown latent names {sorted(unknown)}; use {sorted(LATENT_NAMES)}")
        object.__setattr__(self, "subset", subset)


class Pipeline:
    """A trained MDVAE plus (optionally) the frozen stage-1 VQ-VAEs around it."""

    def __init__(self, mdvae: MDVAE, encoder: Optional[FeatureEncoder] = None):
        self.mdvae = mdvae.eval()
        self.encoder = encoder or FeatureEncoder()

    @classmethod
    def from_checkpoints(cls, model_ckpt: Checkpoint, vq_checkpoints=None) -> "Pipeline":
        mdvae = mdvae_from_checkpoint(model_ckpt)
        scales = model_ckpt.manifest.get("extra", {}).get("features", {})
        if vq_checkpoints is not None:
            vq_a, vq_v = (vq_from_checkpoint(c) if c is not None else None for c in vq_checkpoints)
            if not mdvae.cfg.uses_audio:
                vq_a = None
            if not mdvae.cfg.uses_visual:
                vq_v = None
            enc = FeatureEncoder(vq_a, vq_v, scales.get("scale_a", 1.0), scales.get("scale_v", 1.0))
        else:
            enc = FeatureEncoder()
        return cls(mdvae, enc)

    @property
    def cfg(self):
        return self.mdvae.cfg

    @property
    def has_vq(self) -> bool:
        return self.encoder.raw

    def features(self, x_a, x_v):
        """Observations (B, T, d) -> feature tensors, dropping unused modalities."""
        cfg = self.cfg
        if self.has_vq:
            enc = self.encoder
            f_a = enc._encode(enc.vq_audio, x_a) / enc.scale_a if cfg.uses_audio else None
            f_v = enc._encode(enc.vq_visual, x_v) / enc.scale_v if cfg.uses_visual else None
            return f_a, f_v
        f_a = torch.as_tensor(np.asarray(x_a), dtype=torch.float32) if cfg.uses_audio else None
        f_v = torch.as_tensor(np.asarray(x_v), dtype=torch.float32) if cfg.uses_visual else None
        return f_a, f_v


def _as_pipeline(model) -> Pipeline:
    if isinstance(model, Pipeline):
        return model
    if isinstance(model, MDVAE):
        return Pipeline(model)
    raise InvalidInputError(f"expected an MDVAE or Pipeline, got {type(model).__name__}")


@torch.no_grad()
def analyze_batch(x_a, x_v, model, sample: bool = False, generator=None) -> list:
    """Latents for a batch of (B, T, d) observations.

    Posterior means by default; ``sample=True`` draws one reparameterized
    sample per latent instead (dynamics conditioned on the sampled path).
    """
    pipe = _as_pipeline(model)
    f_a, f_v = pipe.features(x_a, x_v)
    ref = f_a if f_a is not None else f_v
    B, T = ref.shape[:2]
    mdvae = pipe.mdvae
    noise = mdvae.sample_noise(B, T, generator=generator) if sample else mdvae.zero_noise(B, T)
    trace = mdvae.infer(f_a, f_v, noise)
    w = trace.w.numpy()
    z = {n: trace.samples[n].numpy() for n in trace.samples}
    return [LatentBundle(w[i], z["z_av"][i],
                         z["z_a"][i] if "z_a" in z else None,
                         z["z_v"][i] if "z_v" in z else None) for i in range(B)]


def analyze(sequence: AVFeatureSequence, model, sample: bool = False, generator=None) -> LatentBundle:
    pipe = _as_pipeline(model)
    cfg = pipe.cfg
    if not pipe.has_vq:
        if cfg.uses_audio and sequence.x_a.shape[1] != cfg.d_a:
            raise InvalidInputError(f"x_a has dim {sequence.x_a.shape[1]}, model expects {cfg.d_a}")
        if cfg.uses_visual and sequence.x_v.shape[1] != cfg.d_v:
            raise InvalidInputError(f"x_v has dim {sequence.x_v.shape[1]}, model expects {cfg.d_v}")
    return analyze_batch(sequence.x_a[None], sequence.x_v[None], pipe, sample, generator)[0]


def swap(bundle_a: LatentBundle, bundle_b: LatentBundle, spec: SwapSpec) -> LatentBundle:
    """Take the latents named in ``spec`` from B and the rest from A."""
    if not isinstance(spec, SwapSpec):
        spec = SwapSpec(spec)
    dynamic = spec.subset - {"W"}
    if dynamic and bundle_a.T != bundle_b.T:
        raise InvalidInputError(
            f"dynamical swap needs equal lengths, got T={bundle_a.T} and T={bundle_b.T}"
        )
    out = bundle_a.copy()
    for key in spec.subset:
        name = LATENT_NAMES[key]
        src = getattr(bundle_b, name)
        setattr(out, name, None if src is None else src.copy())
    return out


def interpolate_w(w1, w2, alpha: float) -> np.ndarray:
    if not 0.0 <= alpha <= 1.0:
        raise InvalidInputError(f"alpha must lie in [0, 1], got {alpha}")
    return (1.0 - alpha) * np.asarray(w1) + alpha * np.asarray(w2)


def _bundle_tensors(bundles: Sequence[LatentBundle], model: MDVAE):
    def stack(name):
        vals = [getattr(b, name) for b in bundles]
        if any(v is None for v in vals):
            return None
        return torch.as_tensor(np.stack(vals), dtype=torch.float32)

    w = stack("w")
    z_av = stack("z_av")
    z_a = stack("z_a") if model.cfg.uses_audio else None
    z_v = stack("z_v") if model.cfg.uses_visual else None
    if model.cfg.uses_audio and z_a is None:
        raise InvalidInputError("bundle lacks z_a required by the audio decoder")
    if model.cfg.uses_visual and z_v is None:
        raise InvalidInputError("bundle lacks z_v required by the visual decoder")
    return w, z_av, z_a, z_v


@torch.no_grad()
def decode_raw(pipe: Pipeline, mean_a, mean_v):
    """Feature-space means -> quantized codes -> VQ-decoded spectra / images."""
    enc = pipe.encoder
    out_a = out_v = None
    if mean_a is not None and enc.vq_audio is not None:
        vq = enc.vq_audio
        B, T = mean_a.shape[:2]
        grid = vq.unflatten((mean_a * enc.scale_a).reshape(B * T, -1))
        out_a = vq.decode(vq.quantize(grid).quantized).reshape(B, T, -1)
    if mean_v is not None and enc.vq_visual is not None:
        vq = enc.vq_visual
        B, T = mean_v.shape[:2]
        grid = vq.unflatten((mean_v * enc.scale_v).reshape(B * T, -1))
        out_v = vq.decode(vq.quantize(grid).quantized).reshape(B, T, -1)
    return out_a, out_v


@torch.no_grad()
def resynthesize_batch(bundles: Sequence[LatentBundle], model, mode: str = "feature"):
    """Decode bundles; returns a list of AVFeatureSequence (one per bundle).

    ``feature`` mode yields MDVAE-space means. ``raw`` mode quantizes those
    means against the frozen codebooks and runs the VQ decoders, yielding
    power spectra and channel-major flattened images.
    """
    pipe = _as_pipeline(model)
    if mode not in ("feature", "raw"):
        raise InvalidInputError(f"mode must be 'feature' or 'raw', got {mode!r}")
    if mode == "raw" and not pipe.has_vq:
        raise ConfigurationError("raw resynthesis needs stage-1 checkpoints")
    w, z_av, z_a, z_v = _bundle_tensors(bundles, pipe.mdvae)
    mean_a, mean_v = pipe.mdvae.decode(w, z_av, z_a, z_v)
    if mode == "raw":
        mean_a, mean_v = decode_raw(pipe, mean_a, mean_v)
    B, T = z_av.shape[:2]
    empty = np.zeros((T, 0), dtype=np.float32)
    out = []
    for i in range(B):
        xa = mean_a[i].numpy() if mean_a is not None else empty
        xv = mean_v[i].numpy() if mean_v is not None else empty
        out.append(AVFeatureSequence(xa, xv, {"domain": mode}))
    return out


def resynthesize(bundle: LatentBundle, model, mode: str = "feature") -> AVFeatureSequence:
    return resynthesize_batch([bundle], model, mode)[0]


# --------------------------------------------------------------------------- denoising


def _image_layout(stack):
    arr = np.asarray(stack, dtype=np.float64)
    if arr.ndim == 3:
        return arr, arr.shape[1], arr.shape[2]
    if arr.ndim == 4:
        return arr, arr.shape[1], arr.shape[2]
    raise InvalidInputError(f"expected (frames, H, W[, C]) images, got shape {arr.shape}")


def corrupt(stack, region: RegionBox, variance: float, rng=None) -> np.ndarray:
    """Add N(0, variance) pixel noise inside ``region`` on the six central frames."""
    arr, h, w = _image_layout(stack)
    if arr.shape[0] != STACK_LENGTH:
        raise InvalidInputError(f"corruption expects exactly {STACK_LENGTH} frames, got {arr.shape[0]}")
    if variance < 0:
        raise InvalidInputError("noise variance must be >= 0")
    region.check(h, w)
    out = arr.copy()
    if variance == 0:
        return out
    rng = np.random.default_rng() if rng is None else rng
    rs, cs = region.slices()
    patch = out[CORRUPTED_FRAMES, rs, cs]
    noisy = patch + np.sqrt(variance) * rng.standard_normal(patch.shape)
    out[CORRUPTED_FRAMES, rs, cs] = np.clip(noisy, 0.0, 1.0)
    return out


def _to_rows(stack, channels_last):
    arr = np.asarray(stack, dtype=np.float32)
    if arr.ndim == 4 and channels_last:
        arr = arr.transpose(0, 3, 1, 2)
    return arr.reshape(arr.shape[0], -1)


@torch.no_grad()
def denoise_batch(stacks, spectra, model, channels_last=False) -> np.ndarray:
    """Encode, analyze and raw-resynthesize a batch of image stacks.

    ``stacks`` is (B, frames, H, W[, C]); ``spectra`` is (B, frames, bins)
    and is ignored by visual-only models. Returns images in the input layout.
    """
    pipe = _as_pipeline(model)
    if not pipe.has_vq:
        raise ConfigurationError("denoising needs stage-1 checkpoints")
    stacks = np.asarray(stacks, dtype=np.float32)
    x_v = np.stack([_to_rows(s, channels_last) for s in stacks])
    x_a = np.asarray(spectra, dtype=np.float32) if spectra is not None else None
    bundles = analyze_batch(x_a, x_v, pipe)
    recon = resynthesize_batch(bundles, pipe, mode="raw")
    out = np.stack([r.x_v for r in recon])
    if stacks.ndim == 5 and channels_last:
        b, t, h, w, c = stacks.shape
        return out.reshape(b, t, c, h, w).transpose(0, 1, 3, 4, 2)
    return out.reshape(stacks.shape)


def denoise(stack, spectra, model, channels_last=False) -> np.ndarray:
    return denoise_batch(np.asarray(stack)[None], None if spectra is None else np.asarray(spectra)[None],
                         model, channels_last)[0]
