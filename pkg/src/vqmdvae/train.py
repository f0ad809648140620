"""Two-stage training: per-modality VQ-VAEs, then the MDVAE on frozen features."""

from __future__ import annotations

import copy
import logging
import os
from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np
import torch

from .checkpoint import Checkpoint, make_checkpoint
from .errors import ConfigurationError, TrainingDiverged
from .features import SyntheticCorpus
from .mdvae import MDVAE, ModelConfig, elbo
from .vq import VQConfig, VQVAE, ema_update, stage1_loss

log = logging.getLogger(__name__)

STAGE_DEFAULTS = {1: {"learning_rate": 2e-4, "batch_size": 64},
                  2: {"learning_rate": 1e-4, "batch_size": 16}}
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    stage: int = 2
    learning_rate: Optional[float] = None
    batch_size: Optional[int] = None
    max_steps: int = 2000
    seed: int = 0
    deterministic: bool = True
    kl_warmup_steps: int = 0
    unimodal_mode: str = "none"
    log_every: int = 1
    snapshot_every: int = 100

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ConfigurationError("stage must be 1 or 2")
        defaults = STAGE_DEFAULTS[self.stage]
        if self.learning_rate is None:
            self.learning_rate = defaults["learning_rate"]
        if self.batch_size is None:
            self.batch_size = defaults["batch_size"]
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.unimodal_mode not in ("none", "audio-only", "visual-only"):
            raise ConfigurationError(f"unknown unimodal_mode {self.unimodal_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**data)


def effective_seed(seed: int) -> int:
    """``MDVAE_SEED`` in the environment overrides configured seeds."""
    env = os.environ.get("MDVAE_SEED")
    return int(env) if env not in (None, "") else int(seed)


def _setup(config: TrainConfig):
    if config.deterministic:
        torch.use_deterministic_algorithms(True)
    torch.manual_seed(config.seed)
    return torch.Generator().manual_seed(config.seed)


def _batches(n, batch_size, generator):
    """Endless stream of shuffled index batches (reshuffled every epoch)."""
    while True:
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            if len(idx) == batch_size or n < batch_size:
                yield idx


# --------------------------------------------------------------------------- stage 1


def default_vq_configs(corpus: SyntheticCorpus):
    if corpus.spec.mode == "raw-like":
        return VQConfig.audio_small(), VQConfig.visual_small()
    raise ConfigurationError("stage 1 needs raw-like frames; feature-mode corpora bypass it")


def corpus_frames(corpus: SyntheticCorpus, modality: str) -> torch.Tensor:
    x_a, x_v = corpus.stacked()
    x = x_a if modality == "audio" else x_v
    return torch.from_numpy(x.reshape(-1, x.shape[-1]).copy())


def train_vq(config: TrainConfig, frames: torch.Tensor, vq_cfg: VQConfig) -> Checkpoint:
    """Fit one VQ-VAE on independent frames (no temporal modeling)."""
    gen = _setup(config)
    model = VQVAE(vq_cfg, seed=config.seed)
    inputs = model.frames_to_input(frames)
    opt = torch.optim.Adam([p for p in model.parameters() if p.requires_grad],
                           lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    history = []
    last_good = (0, copy.deepcopy(model.state_dict()))
    batches = _batches(len(inputs), config.batch_size, gen)
    for step in range(1, config.max_steps + 1):
        x = inputs[next(batches)]
        z = model.encode(x)
        q = model.quantize(z)
        recon = model.decode(q.quantized)
        loss = stage1_loss(vq_cfg.modality, x, recon, z, q.quantized, vq_cfg.commitment_beta)
        total = loss.total
        if not torch.isfinite(total):
            snap_step, state = last_good
            model.load_state_dict(state)
            raise TrainingDiverged(
                f"{vq_cfg.modality} VQ-VAE loss became non-finite at step {step}", step,
                make_checkpoint("vqvae", vq_cfg.to_dict(), model, snap_step, history),
            )
        opt.zero_grad()
        total.backward()
        opt.step()
        ema_update(model.codebook, q.indices, z)
        if step % config.log_every == 0 or step == config.max_steps:
            history.append({"step": step, **loss.as_dict()})
        if step % config.snapshot_every == 0:
            last_good = (step, copy.deepcopy(model.state_dict()))
    extra = {"train": config.to_dict()}
    return make_checkpoint("vqvae", vq_cfg.to_dict(), model, config.max_steps, history, extra)


def train_stage1(config: TrainConfig, corpus: SyntheticCorpus, vq_audio: VQConfig = None,
                 vq_visual: VQConfig = None):
    """Train the audio and visual VQ-VAEs independently; returns (audio, visual)."""
    if corpus.spec.mode != "raw-like":
        raise ConfigurationError("stage 1 needs a raw-like corpus")
    da, dv = default_vq_configs(corpus)
    vq_audio = vq_audio or da
    vq_visual = vq_visual or dv
    ck_a = train_vq(config, corpus_frames(corpus, "audio"), vq_audio)
    ck_v = train_vq(config, corpus_frames(corpus, "visual"), vq_visual)
    return ck_a, ck_v


def vq_from_checkpoint(ckpt: Checkpoint) -> VQVAE:
    if ckpt.model_type != "vqvae":
        raise ConfigurationError(f"expected a vqvae checkpoint, got {ckpt.model_type!r}")
    model = VQVAE(VQConfig.from_dict(ckpt.config))
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


# --------------------------------------------------------------------------- stage 2


class FeatureEncoder:
    """Maps corpus observations to MDVAE feature space.

    Feature-mode corpora pass through unchanged. Raw-like corpora go through
    the frozen VQ encoders (pre-quantization) and a per-modality scalar
    rescaling to unit standard deviation.
    """

    def __init__(self, vq_audio: Optional[VQVAE] = None, vq_visual: Optional[VQVAE] = None,
                 scale_a: float = 1.0, scale_v: float = 1.0):
        self.vq_audio = vq_audio
        self.vq_visual = vq_visual
        self.scale_a = float(scale_a)
        self.scale_v = float(scale_v)

    @property
    def raw(self) -> bool:
        return self.vq_audio is not None or self.vq_visual is not None

    @torch.no_grad()
    def _encode(self, vq, x):
        shape = x.shape
        flat = torch.as_tensor(x, dtype=torch.float32).reshape(-1, shape[-1])
        z = vq.flatten(vq.encode(vq.frames_to_input(flat)))
        return z.reshape(*shape[:-1], -1)

    def encode(self, x_a, x_v):
        """(..., T, raw dims) numpy/tensors -> float32 feature tensors."""
        if not self.raw:
            return (torch.as_tensor(np.asarray(x_a), dtype=torch.float32),
                    torch.as_tensor(np.asarray(x_v), dtype=torch.float32))
        f_a = self._encode(self.vq_audio, x_a) / self.scale_a if self.vq_audio is not None else None
        f_v = self._encode(self.vq_visual, x_v) / self.scale_v if self.vq_visual is not None else None
        return f_a, f_v

    def fit_scales(self, x_a, x_v):
        self.scale_a = self.scale_v = 1.0
        f_a, f_v = self.encode(x_a, x_v)
        self.scale_a = float(f_a.std()) if f_a is not None else 1.0
        self.scale_v = float(f_v.std()) if f_v is not None else 1.0
        return self

    def to_dict(self) -> dict:
        return {"scale_a": self.scale_a, "scale_v": self.scale_v}


def _modalities(unimodal_mode: str) -> str:
    return {"none": "av", "audio-only": "audio", "visual-only": "visual"}[unimodal_mode]


def train_stage2(config: TrainConfig, corpus: SyntheticCorpus, vq_checkpoints=None,
                 model_cfg: Optional[ModelConfig] = None, return_model: bool = False):
    """Fit the MDVAE by minimising the negative ELBO with Adam.

    ``vq_checkpoints`` is an (audio, visual) pair of stage-1 checkpoints and is
    required for raw-like corpora. ``model_cfg`` may be a ModelConfig or a dict
    of field overrides applied on top of the feature dimensions.
    """
    gen = _setup(config)
    x_a, x_v = corpus.stacked()
    if corpus.spec.mode == "raw-like":
        if not vq_checkpoints or any(c is None for c in vq_checkpoints):
            raise ConfigurationError("raw-like corpus needs stage-1 checkpoints (audio, visual)")
        vq_a, vq_v = (vq_from_checkpoint(c) for c in vq_checkpoints)
        encoder = FeatureEncoder(vq_a, vq_v).fit_scales(x_a, x_v)
    else:
        encoder = FeatureEncoder()
    f_a, f_v = encoder.encode(x_a, x_v)

    modalities = _modalities(config.unimodal_mode)
    if model_cfg is None:
        model_cfg = ModelConfig(d_a=f_a.shape[-1], d_v=f_v.shape[-1], modalities=modalities)
    elif isinstance(model_cfg, dict):
        # partial field overrides on top of the feature-derived dims
        model_cfg = ModelConfig.from_dict({"d_a": f_a.shape[-1], "d_v": f_v.shape[-1],
                                           **model_cfg, "modalities": modalities})
    elif model_cfg.modalities != modalities:
        model_cfg = ModelConfig.from_dict({**model_cfg.to_dict(), "modalities": modalities})
    if (model_cfg.d_a, model_cfg.d_v) != (f_a.shape[-1], f_v.shape[-1]):
        raise ConfigurationError(
            f"model dims (d_a={model_cfg.d_a}, d_v={model_cfg.d_v}) do not match features "
            f"({f_a.shape[-1]}, {f_v.shape[-1]})"
        )

    model = MDVAE(model_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    N, T_all = f_a.shape[:2]
    T = min(model_cfg.T_train, T_all)
    history = []
    last_good = (0, copy.deepcopy(model.state_dict()))
    batches = _batches(N, config.batch_size, gen)
    for step in range(1, config.max_steps + 1):
        idx = next(batches)
        if T_all > T:
            start = int(torch.randint(0, T_all - T + 1, (1,), generator=gen))
        else:
            start = 0
        xa = f_a[idx, start:start + T]
        xv = f_v[idx, start:start + T]
        kl_weight = min(1.0, step / config.kl_warmup_steps) if config.kl_warmup_steps > 0 else 1.0
        noise = model.sample_noise(len(idx), T, generator=gen)
        try:
            loss = elbo(model, xa if model_cfg.uses_audio else None,
                        xv if model_cfg.uses_visual else None, noise=noise, kl_weight=kl_weight)
        except ArithmeticError as exc:
            snap_step, state = last_good
            model.load_state_dict(state)
            raise TrainingDiverged(
                f"MDVAE training diverged at step {step}: {exc}", step,
                make_checkpoint("mdvae", model_cfg.to_dict(), model, snap_step, history,
                                {"features": encoder.to_dict()}),
            ) from exc
        opt.zero_grad()
        loss.total.backward()
        opt.step()
        if step % config.log_every == 0 or step == config.max_steps:
            history.append({"step": step, **loss.as_floats()})
        if step % config.snapshot_every == 0:
            last_good = (step, copy.deepcopy(model.state_dict()))
    model.eval()
    extra = {"features": encoder.to_dict(), "train": config.to_dict(), "corpus_mode": corpus.spec.mode}
    ckpt = make_checkpoint("mdvae", model_cfg.to_dict(), model, config.max_steps, history, extra)
    if return_model:
        return ckpt, model
    return ckpt


def mdvae_from_checkpoint(ckpt: Checkpoint) -> MDVAE:
    if ckpt.model_type != "mdvae":
        raise ConfigurationError(f"expected an mdvae checkpoint, got {ckpt.model_type!r}")
    model = MDVAE(ModelConfig.from_dict(ckpt.config))
    model.load_state_dict(ckpt.state_dict())
    model.eval()
    return model
