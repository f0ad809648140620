"""Per-modality vector-quantized autoencoders (stage 1)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, InvalidInputError
from .features import SPECTRAL_FLOOR

_LOG_FLOOR = math.log(SPECTRAL_FLOOR)
_LOG_CEIL = 40.0


@dataclass
class VQConfig:
    modality: str = "visual"
    K: int = 512
    D: int = 32
    grid: tuple = (8, 8)
    commitment_beta: float = 0.25
    decay: float = 0.99
    laplace_eps: float = 1e-5
    channels: tuple = (64, 128, 128)
    in_channels: int = 3
    input_size: int = 64
    n_residual: int = 2

    def __post_init__(self):
        if self.modality not in ("audio", "visual"):
            raise ConfigurationError(f"modality must be 'audio' or 'visual', got {self.modality!r}")
        self.grid = tuple(int(g) for g in self.grid)
        self.channels = tuple(int(c) for c in self.channels)
        if self.K < 1:
            raise ConfigurationError("codebook must contain at least one vector")
        if not 0.0 < self.decay < 1.0:
            raise ConfigurationError("EMA decay must lie in (0, 1)")
        expected = self.input_size // 8
        if self.modality == "visual" and self.grid != (expected, expected):
            raise ConfigurationError(f"visual grid must be {(expected, expected)} for input {self.input_size}")
        if self.modality == "audio" and self.grid != (expected,):
            raise ConfigurationError(f"audio grid must be {(expected,)} for {self.input_size} bins")

    @property
    def feature_dim(self) -> int:
        return int(np.prod(self.grid)) * self.D

    @property
    def input_shape(self) -> tuple:
        if self.modality == "visual":
            return (self.in_channels, self.input_size, self.input_size)
        return (1, self.input_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "VQConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown VQConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def visual(cls, **kw):
        return cls(**{"modality": "visual", "K": 512, "D": 32, "grid": (8, 8), **kw})

    @classmethod
    def audio(cls, **kw):
        base = dict(modality="audio", K=128, D=8, grid=(64,), channels=(16, 32, 32),
                    in_channels=1, input_size=513, n_residual=1)
        base.update(kw)
        return cls(**base)

    @classmethod
    def visual_small(cls, **kw):
        """Shrunk stack for 16 x 16 grayscale frames."""
        base = dict(modality="visual", K=256, D=32, grid=(2, 2), channels=(16, 32, 32),
                    in_channels=1, input_size=16)
        base.update(kw)
        return cls(**base)

    @classmethod
    def audio_small(cls, **kw):
        """Shrunk stack for 65-bin spectra."""
        base = dict(modality="audio", K=128, D=8, grid=(8,), channels=(8, 16, 16),
                    in_channels=1, input_size=65, n_residual=1)
        base.update(kw)
        return cls(**base)


# --------------------------------------------------------------------------- codebook


class Codebook(nn.Module):
    """K x D code vectors maintained by exponential moving averages."""

    def __init__(self, K: int, D: int, decay: float = 0.99, laplace_eps: float = 1e-5,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        if K < 1:
            raise ConfigurationError("codebook must contain at least one vector")
        self.decay = decay
        self.laplace_eps = laplace_eps
        init = torch.randn(K, D, generator=generator) / math.sqrt(D)
        self.register_buffer("vectors", init)
        self.register_buffer("ema_counts", torch.ones(K))
        self.register_buffer("ema_sums", init.clone())

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def D(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_vectors(cls, vectors, counts=None, decay=0.99, laplace_eps=1e-5):
        vectors = torch.as_tensor(vectors)
        if not vectors.is_floating_point():
            vectors = vectors.to(torch.get_default_dtype())
        cb = cls(vectors.shape[0], vectors.shape[1], decay, laplace_eps).to(vectors.dtype)
        counts = torch.ones(cb.K) if counts is None else torch.as_tensor(counts, dtype=vectors.dtype)
        cb.ema_counts.copy_(counts)
        cb.ema_sums.copy_(vectors * counts[:, None])
        cb.vectors.copy_(vectors)
        return cb

    def smoothed_counts(self) -> torch.Tensor:
        n = self.ema_counts.sum()
        return (self.ema_counts + self.laplace_eps) / (n + self.K * self.laplace_eps) * n


@dataclass
class VQOutput:
    continuous: torch.Tensor
    indices: torch.Tensor
    quantized: torch.Tensor
    losses: dict = field(default_factory=dict)


def nearest_codes(flat: torch.Tensor, vectors: torch.Tensor, chunk_elems: int = 1 << 24) -> torch.Tensor:
    """Index of the nearest code for every row of ``flat`` (ties -> lowest index)."""
    n, d = flat.shape
    rows = max(1, chunk_elems // max(1, vectors.shape[0] * d))
    out = []
    for start in range(0, n, rows):
        block = flat[start:start + rows]
        # exact squared distances; the expanded ||x||^2 - 2x.e + ||e||^2 form can misorder near-ties
        dist = ((block[:, None, :] - vectors[None, :, :]) ** 2).sum(-1)
        out.append(torch.argmin(dist, dim=1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


class _StraightThrough(torch.autograd.Function):
    """Forward returns the code values bit-exactly; backward is the identity."""

    @staticmethod
    def forward(ctx, codes, hard):
        return hard.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def quantize(codes: torch.Tensor, codebook: Codebook) -> VQOutput:
    """Snap every trailing-dim vector of ``codes`` to its nearest code.

    The returned ``quantized`` tensor carries the code values in the forward
    pass and passes gradients straight through to ``codes``.
    """
    if codebook.K == 0:
        raise ConfigurationError("empty codebook")
    if codes.shape[-1] != codebook.D:
        raise InvalidInputError(f"code dim {codes.shape[-1]} does not match codebook dim {codebook.D}")
    flat = codes.reshape(-1, codebook.D)
    with torch.no_grad():
        idx = nearest_codes(flat.detach(), codebook.vectors)
    hard = codebook.vectors[idx].reshape(codes.shape)
    commitment = F.mse_loss(codes, hard.detach())
    st = _StraightThrough.apply(codes, hard.detach())
    return VQOutput(continuous=codes, indices=idx.reshape(codes.shape[:-1]), quantized=st,
                    losses={"commitment": commitment})


@torch.no_grad()
def ema_update(codebook: Codebook, indices: torch.Tensor, codes: torch.Tensor) -> Codebook:
    """One EMA step of code counts and sums; vectors = sums / smoothed counts."""
    flat = codes.detach().reshape(-1, codebook.D).to(codebook.vectors.dtype)
    idx = indices.reshape(-1)
    onehot = F.one_hot(idx, codebook.K).to(flat.dtype)
    batch_counts = onehot.sum(0)
    batch_sums = onehot.T @ flat
    g = codebook.decay
    codebook.ema_counts.mul_(g).add_((1 - g) * batch_counts)
    codebook.ema_sums.mul_(g).add_((1 - g) * batch_sums)
    codebook.vectors.copy_(codebook.ema_sums / codebook.smoothed_counts()[:, None])
    return codebook


# --------------------------------------------------------------------------- conv stacks


class _Residual(nn.Module):
    def __init__(self, conv, channels, act):
        super().__init__()
        self.act = act
        self.conv1 = conv(channels, channels, 3, 1, 1)
        self.conv2 = conv(channels, channels, 3, 1, 1)

    def forward(self, x):
        return x + self.conv2(self.act(self.conv1(self.act(x))))


class _ResidualStack(nn.Module):
    def __init__(self, conv, channels, n, act):
        super().__init__()
        self.blocks = nn.ModuleList(_Residual(conv, channels, act) for _ in range(n))
        self.act = act

    def forward(self, x):
        for block in self.blocks:
            x = block(x)
        return self.act(x)


class VisualEncoder(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        c1, c2, c3 = cfg.channels
        self.net = nn.Sequential(
            nn.Conv2d(cfg.in_channels, c1, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(c1, c2, 4, 2, 1), nn.ReLU(),
            nn.Conv2d(c2, c3, 4, 2, 1), nn.ReLU(),
            _ResidualStack(nn.Conv2d, c3, cfg.n_residual, nn.ReLU()),
            nn.Conv2d(c3, cfg.D, 1, 1),
        )

    def forward(self, x):
        return self.net(x)


class VisualDecoder(nn.Module):
    def __init__(self, cfg: VQConfig):
        super().__init__()
        c1, c2, c3 = cfg.channels
        self.net = nn.Sequential(
            nn.ConvTranspose2d(cfg.D, c3, 1, 1),
            _ResidualStack(nn.ConvTranspose2d, c3, cfg.n_residual, nn.ReLU()),
            nn.ConvTranspose2d(c3, c1, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(c1, c1, 4, 2, 1), nn.ReLU(),
            nn.ConvTranspose2d(c1, cfg.in_channels, 4, 2, 1),
        )

    def forward(self, z):
        return self.net(z)


class AudioEncoder(nn.Module):
    """Operates on log-power spectra."""

    def __init__(self, cfg: VQConfig):
        super().__init__()
        c1, c2, c3 = cfg.channels
        self.net = nn.Sequential(
            nn.Conv1d(1, c1, 4, 2, 1), nn.Tanh(),
            nn.Conv1d(c1, c2, 4, 2, 1), nn.Tanh(),
            nn.Conv1d(c2, c3, 3, 2, 1), nn.Tanh(),
            _ResidualStack(nn.Conv1d, c3, cfg.n_residual, nn.Tanh()),
            nn.Conv1d(c3, cfg.D, 1, 1),
        )

    def forward(self, x):
        return self.net(torch.log(x.clamp_min(SPECTRAL_FLOOR)))


class AudioDecoder(nn.Module):
    """Outputs power spectra; exp keeps them strictly positive."""

    def __init__(self, cfg: VQConfig):
        super().__init__()
        c1, c2, c3 = cfg.channels
        self.net = nn.Sequential(
            nn.ConvTranspose1d(cfg.D, c3, 1, 1),
            _ResidualStack(nn.ConvTranspose1d, c3, cfg.n_residual, nn.Tanh()),
            nn.ConvTranspose1d(c3, c2, 3, 2, 1, output_padding=1), nn.Tanh(),
            nn.ConvTranspose1d(c2, c1, 4, 2, 1), nn.Tanh(),
            # output_padding=1 turns 2L into the odd bin count 2L + 1
            nn.ConvTranspose1d(c1, 1, 4, 2, 1, output_padding=1),
        )

    def forward(self, z):
        return torch.exp(self.net(z).clamp(_LOG_FLOOR, _LOG_CEIL))


class VQVAE(nn.Module):
    def __init__(self, cfg: VQConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.codebook = Codebook(cfg.K, cfg.D, cfg.decay, cfg.laplace_eps, generator=gen)
        if cfg.modality == "visual":
            self.encoder, self.decoder = VisualEncoder(cfg), VisualDecoder(cfg)
        else:
            self.encoder, self.decoder = AudioEncoder(cfg), AudioDecoder(cfg)

    def _check(self, x, shape, what):
        if tuple(x.shape[1:]) != tuple(shape):
            raise InvalidInputError(f"{what} expects batch x {tuple(shape)}, got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Frames -> continuous code grid (batch, D, *grid)."""
        if self.cfg.modality == "audio" and x.dim() == 2:
            x = x[:, None, :]
        self._check(x, self.cfg.input_shape, f"{self.cfg.modality} encoder")
        return self.encoder(x)

    def quantize(self, z: torch.Tensor) -> VQOutput:
        self._check(z, (self.cfg.D, *self.cfg.grid), "quantizer")
        out = quantize(z.movedim(1, -1), self.codebook)
        return VQOutput(
            continuous=z,
            indices=out.indices,
            quantized=out.quantized.movedim(-1, 1),
            losses=out.losses,
        )

    def decode(self, zq: torch.Tensor) -> torch.Tensor:
        self._check(zq, (self.cfg.D, *self.cfg.grid), f"{self.cfg.modality} decoder")
        return self.decoder(zq)

    def forward(self, x):
        z = self.encode(x)
        q = self.quantize(z)
        return self.decode(q.quantized), q

    # flat <-> grid: MDVAE features are grids flattened channel-major
    def flatten(self, z: torch.Tensor) -> torch.Tensor:
        return z.reshape(z.shape[0], -1)

    def unflatten(self, flat: torch.Tensor) -> torch.Tensor:
        return flat.reshape(flat.shape[0], self.cfg.D, *self.cfg.grid)

    def frames_to_input(self, frames: torch.Tensor) -> torch.Tensor:
        """Flattened corpus rows (N x d) -> encoder input layout."""
        return frames.reshape(frames.shape[0], *self.cfg.input_shape)


# --------------------------------------------------------------------------- losses


def is_divergence(x, y):
    """Itakura-Saito divergence summed over all entries."""
    xt = torch.as_tensor(x, dtype=torch.float64) if not torch.is_tensor(x) else x
    yt = torch.as_tensor(y, dtype=torch.float64) if not torch.is_tensor(y) else y
    if xt.shape != yt.shape:
        raise InvalidInputError(f"shape mismatch {tuple(xt.shape)} vs {tuple(yt.shape)}")
    if (xt <= 0).any() or (yt <= 0).any():
        raise InvalidInputError("Itakura-Saito divergence needs strictly positive spectra")
    r = xt / yt
    val = (r - torch.log(r) - 1).sum()
    return val if torch.is_tensor(x) else float(val)


def _is_elementwise(x, y):
    r = x.clamp_min(SPECTRAL_FLOOR) / y.clamp_min(SPECTRAL_FLOOR)
    return r - torch.log(r) - 1


@dataclass
class Stage1Loss:
    recon: torch.Tensor
    commitment: torch.Tensor
    beta: float

    @property
    def total(self) -> torch.Tensor:
        return self.recon + self.beta * self.commitment

    def as_dict(self) -> dict:
        return {"recon": float(self.recon.detach()), "commitment": float(self.commitment.detach()), "total": float(self.total.detach())}


def stage1_loss(modality, inputs, recon, continuous, quantized, beta=0.25) -> Stage1Loss:
    """Reconstruction plus beta-weighted commitment; both are per-element means."""
    if modality == "visual":
        rec = F.mse_loss(recon, inputs)
    elif modality == "audio":
        rec = _is_elementwise(inputs, recon).mean()
    else:
        raise ConfigurationError(f"unknown modality {modality!r}")
    commit = F.mse_loss(continuous, quantized.detach())
    return Stage1Loss(recon=rec, commitment=commit, beta=beta)
