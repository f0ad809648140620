"""Multimodal dynamical VAE: generative model, causal inference network, ELBO.

Latents per sequence: a static vector ``w`` shared by both modalities, a
shared dynamical sequence ``z_av`` and modality-specific sequences ``z_a`` and
``z_v``. Each dynamical latent has one GRU that is driven by its own past
samples and feeds both the learned autoregressive prior and the posterior.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .errors import ConfigurationError, InvalidInputError, NumericError

LOGVAR_LIMIT = 14.0


@dataclass
class ModelConfig:
    d_a: int = 512
    d_v: int = 2048
    l_w: int = 84
    l_av: int = 16
    l_a: int = 8
    l_v: int = 8
    T_train: int = 30
    modalities: str = "av"
    visual_hidden: tuple = (1024, 512)
    w_rnn: int = 256
    w_hidden: int = 256
    av_rnn: int = 128
    av_prior_hidden: int = 64
    av_post_hidden: tuple = (256, 128)
    a_rnn: int = 128
    a_prior_hidden: int = 32
    a_post_hidden: tuple = (128, 32)
    v_rnn: int = 128
    v_prior_hidden: int = 64
    v_post_hidden: tuple = (256, 128)
    dec_v_hidden: tuple = (512, 1024)
    dec_a_hidden: tuple = (128, 256)

    def __post_init__(self):
        if self.modalities not in ("av", "audio", "visual"):
            raise ConfigurationError(f"modalities must be av, audio or visual, got {self.modalities!r}")
        for name in ("visual_hidden", "av_post_hidden", "a_post_hidden", "v_post_hidden",
                     "dec_v_hidden", "dec_a_hidden"):
            setattr(self, name, tuple(int(x) for x in getattr(self, name)))
        for f in fields(self):
            val = getattr(self, f.name)
            vals = val if isinstance(val, tuple) else (val,)
            if f.name != "modalities" and any(int(v) < 1 for v in vals):
                raise ConfigurationError(f"{f.name} must be >= 1")

    @property
    def uses_audio(self) -> bool:
        return self.modalities in ("av", "audio")

    @property
    def uses_visual(self) -> bool:
        return self.modalities in ("av", "visual")

    @property
    def r_v(self) -> int:
        return self.visual_hidden[-1]

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def tiny(cls, **kw):
        """All widths <= 6; used for finite-difference gradient checks."""
        base = dict(d_a=4, d_v=6, l_w=3, l_av=2, l_a=2, l_v=2, T_train=3,
                    visual_hidden=(5, 4), w_rnn=3, w_hidden=4,
                    av_rnn=3, av_prior_hidden=3, av_post_hidden=(5, 4),
                    a_rnn=3, a_prior_hidden=3, a_post_hidden=(4, 3),
                    v_rnn=3, v_prior_hidden=3, v_post_hidden=(5, 4),
                    dec_v_hidden=(5, 6), dec_a_hidden=(4, 5))
        base.update(kw)
        return cls(**base)


@dataclass
class DiagGaussian:
    mean: torch.Tensor
    log_var: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_var.shape:
            raise InvalidInputError(
                f"mean {tuple(self.mean.shape)} and log_var {tuple(self.log_var.shape)} differ"
            )
        self.log_var = self.log_var.clamp(-LOGVAR_LIMIT, LOGVAR_LIMIT)

    @property
    def std(self):
        return torch.exp(0.5 * self.log_var)

    def sample(self, noise):
        return reparameterize(self, noise)

    @classmethod
    def standard(cls, shape, like: torch.Tensor):
        z = torch.zeros(shape, dtype=like.dtype, device=like.device)
        return cls(z, z.clone())


def reparameterize(g: DiagGaussian, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != g.mean.shape:
        raise InvalidInputError(f"noise shape {tuple(noise.shape)} != {tuple(g.mean.shape)}")
    return g.mean + torch.exp(0.5 * g.log_var) * noise


def kl_diag_gaussian(q: DiagGaussian, p: DiagGaussian, reduce: bool = True):
    """KL(q || p) for diagonal Gaussians, summed over the last dimension."""
    if q.mean.shape != p.mean.shape:
        raise InvalidInputError(f"KL between mismatched shapes {tuple(q.mean.shape)} and {tuple(p.mean.shape)}")
    var_ratio = torch.exp(q.log_var - p.log_var)
    diff2 = (q.mean - p.mean) ** 2 * torch.exp(-p.log_var)
    kl = 0.5 * (p.log_var - q.log_var + var_ratio + diff2 - 1.0)
    return kl.sum(-1) if reduce else kl


@dataclass
class LatentBundle:
    """Latents of one sequence as numpy arrays; missing modalities hold None."""
    w: np.ndarray
    z_av: np.ndarray
    z_a: Optional[np.ndarray] = None
    z_v: Optional[np.ndarray] = None

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float32)
        self.z_av = np.asarray(self.z_av, dtype=np.float32)
        T = self.z_av.shape[0]
        for name in ("z_a", "z_v"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray(val, dtype=np.float32)
                if val.shape[0] != T:
                    raise InvalidInputError(f"{name} has {val.shape[0]} steps, z_av has {T}")
                setattr(self, name, val)
        for name in ("w", "z_av", "z_a", "z_v"):
            val = getattr(self, name)
            if val is not None and not np.all(np.isfinite(val)):
                raise NumericError(f"latent {name} is not finite")

    @property
    def T(self) -> int:
        return self.z_av.shape[0]

    def copy(self) -> "LatentBundle":
        return LatentBundle(*(None if getattr(self, n) is None else getattr(self, n).copy()
                              for n in ("w", "z_av", "z_a", "z_v")))


@dataclass
class InferenceTrace:
    r_a: Optional[torch.Tensor]
    r_v: Optional[torch.Tensor]
    q_w: DiagGaussian
    w: torch.Tensor
    hidden: dict = field(default_factory=dict)
    posteriors: dict = field(default_factory=dict)
    priors: dict = field(default_factory=dict)
    samples: dict = field(default_factory=dict)


@dataclass
class LossBundle:
    terms: dict
    weights: dict
    total: torch.Tensor

    def as_floats(self) -> dict:
        out = {k: float(v.detach()) for k, v in self.terms.items()}
        out["total"] = float(self.total.detach())
        return out


def _mlp(sizes, act, final_act=False):
    layers = []
    for i in range(len(sizes) - 1):
        layers.append(nn.Linear(sizes[i], sizes[i + 1]))
        if i < len(sizes) - 2 or final_act:
            layers.append(act())
    return nn.Sequential(*layers)


class GaussianHead(nn.Module):
    def __init__(self, hidden, out):
        super().__init__()
        self.mean = nn.Linear(hidden, out)
        self.log_var = nn.Linear(hidden, out)

    def forward(self, h):
        return DiagGaussian(self.mean(h), self.log_var(h))


class DynamicalLatent(nn.Module):
    """Shared recurrence plus prior head and posterior network for one latent."""

    def __init__(self, dim, rnn, prior_hidden, post_in, post_hidden, post_act):
        super().__init__()
        self.dim = dim
        self.rnn = nn.GRUCell(dim, rnn)
        self.prior_net = _mlp([rnn, prior_hidden], nn.ReLU, final_act=True)
        self.prior_head = GaussianHead(prior_hidden, dim)
        self.post_net = _mlp([post_in, *post_hidden], post_act, final_act=True)
        self.post_head = GaussianHead(post_hidden[-1], dim)

    def prior(self, h):
        return self.prior_head(self.prior_net(h))

    def posterior(self, inputs):
        return self.post_head(self.post_net(inputs))


class MDVAE(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg
        r_dim = 0
        if c.uses_visual:
            # B1
            self.visual_embed = _mlp([c.d_v, *c.visual_hidden], nn.ReLU, final_act=True)
            r_dim += c.r_v
        if c.uses_audio:
            r_dim += c.d_a  # B2 is the identity
        # B3
        self.w_rnn = nn.GRU(r_dim, c.w_rnn, num_layers=1, batch_first=True, bidirectional=True)
        self.w_net = _mlp([2 * c.w_rnn, c.w_hidden], nn.Tanh, final_act=True)
        self.w_head = GaussianHead(c.w_hidden, c.l_w)
        # B4 / B5
        self.z_av = DynamicalLatent(c.l_av, c.av_rnn, c.av_prior_hidden,
                                    r_dim + c.av_rnn + c.l_w, c.av_post_hidden, nn.ReLU)
        if c.uses_audio:
            # B6 / B7 / B11
            self.z_a = DynamicalLatent(c.l_a, c.a_rnn, c.a_prior_hidden,
                                       c.d_a + c.a_rnn + c.l_w + c.l_av, c.a_post_hidden, nn.Tanh)
            self.dec_a = _mlp([c.l_a + c.l_av + c.l_w, *c.dec_a_hidden, c.d_a], nn.Tanh)
        if c.uses_visual:
            # B8 / B9 / B10
            self.z_v = DynamicalLatent(c.l_v, c.v_rnn, c.v_prior_hidden,
                                       c.r_v + c.v_rnn + c.l_w + c.l_av, c.v_post_hidden, nn.ReLU)
            self.dec_v = _mlp([c.l_v + c.l_av + c.l_w, *c.dec_v_hidden, c.d_v], nn.ReLU)

    @property
    def dynamic_names(self):
        names = ["z_av"]
        if self.cfg.uses_audio:
            names.append("z_a")
        if self.cfg.uses_visual:
            names.append("z_v")
        return names

    def latent_dim(self, name):
        return {"w": self.cfg.l_w, "z_av": self.cfg.l_av, "z_a": self.cfg.l_a, "z_v": self.cfg.l_v}[name]

    # ------------------------------------------------------------ inference
    def embed_observations(self, x_a, x_v):
        """B1/B2: (B, T, d_a), (B, T, d_v) -> (r_a, r_v); absent modalities give None."""
        c = self.cfg
        r_a = r_v = None
        if c.uses_audio:
            if x_a is None or x_a.shape[-1] != c.d_a:
                raise InvalidInputError(f"x_a must have last dim {c.d_a}")
            r_a = x_a
        if c.uses_visual:
            if x_v is None or x_v.shape[-1] != c.d_v:
                raise InvalidInputError(f"x_v must have last dim {c.d_v}")
            r_v = self.visual_embed(x_v)
        if r_a is not None and r_v is not None and r_a.shape[:-1] != r_v.shape[:-1]:
            raise InvalidInputError("audio and visual sequences must share batch and T")
        return r_a, r_v

    def _joint_r(self, r_a, r_v):
        parts = [p for p in (r_v, r_a) if p is not None]
        return torch.cat(parts, dim=-1)

    def infer_w(self, r_a, r_v) -> DiagGaussian:
        r = self._joint_r(r_a, r_v)
        if r.shape[1] == 0:
            raise InvalidInputError("cannot infer w from an empty sequence")
        _, h_n = self.w_rnn(r)
        h = torch.cat([h_n[0], h_n[1]], dim=-1)
        q = self.w_head(self.w_net(h))
        _check_finite("B3 (w posterior)", q.mean, q.log_var)
        return q

    def infer_dynamics(self, r_a, r_v, w, noise: Optional[dict] = None) -> InferenceTrace:
        """Causal pass over t = 1..T sampling z_av, then z_a and z_v.

        ``noise`` maps latent names to (B, T, dim) standard-normal tensors; a
        zero tensor yields the posterior-mean trajectory.
        """
        c = self.cfg
        r = self._joint_r(r_a, r_v)
        B, T = r.shape[:2]
        if w.shape[-1] != c.l_w:
            raise InvalidInputError(f"w must have dim {c.l_w}")
        names = self.dynamic_names
        nets = {n: getattr(self, n) for n in names}
        h = {n: r.new_zeros(B, nets[n].rnn.hidden_size) for n in names}
        z_prev = {n: r.new_zeros(B, nets[n].dim) for n in names}
        hs = {n: [] for n in names}
        q_mean = {n: [] for n in names}
        q_logvar = {n: [] for n in names}
        zs = {n: [] for n in names}
        for t in range(T):
            step = {}
            for n in names:
                h[n] = nets[n].rnn(z_prev[n], h[n])
                hs[n].append(h[n])
            for n in names:
                if n == "z_av":
                    inp = torch.cat([r[:, t], h[n], w], dim=-1)
                elif n == "z_a":
                    inp = torch.cat([r_a[:, t], h[n], w, step["z_av"]], dim=-1)
                else:
                    inp = torch.cat([r_v[:, t], h[n], w, step["z_av"]], dim=-1)
                q = nets[n].posterior(inp)
                eps = noise[n][:, t]
                step[n] = reparameterize(q, eps)
                q_mean[n].append(q.mean)
                q_logvar[n].append(q.log_var)
                zs[n].append(step[n])
            z_prev = step
        trace = InferenceTrace(r_a=r_a, r_v=r_v, q_w=None, w=w)
        blocks = {"z_av": ("B4", "B5"), "z_a": ("B6", "B7"), "z_v": ("B8", "B9")}
        for n in names:
            hidden = torch.stack(hs[n], 1)
            prior = nets[n].prior(hidden)
            post = DiagGaussian(torch.stack(q_mean[n], 1), torch.stack(q_logvar[n], 1))
            _check_finite(f"{blocks[n][0]} ({n} prior)", prior.mean, prior.log_var)
            _check_finite(f"{blocks[n][1]} ({n} posterior)", post.mean, post.log_var)
            trace.hidden[n] = hidden
            trace.priors[n] = prior
            trace.posteriors[n] = post
            trace.samples[n] = torch.stack(zs[n], 1)
        return trace

    # ------------------------------------------------------------ generation
    def _broadcast_w(self, w, like):
        return w[:, None, :].expand(*like.shape[:2], w.shape[-1])

    def decode_audio(self, w, z_av, z_a):
        """B11 mean of x_a; inputs (..., l_w), (..., l_av), (..., l_a)."""
        if not self.cfg.uses_audio:
            raise ConfigurationError("model has no audio decoder")
        _check_dims(((w, self.cfg.l_w, "w"), (z_av, self.cfg.l_av, "z_av"), (z_a, self.cfg.l_a, "z_a")))
        return self.dec_a(torch.cat([z_a, z_av, w], dim=-1))

    def decode_visual(self, w, z_av, z_v):
        """B10 mean of x_v."""
        if not self.cfg.uses_visual:
            raise ConfigurationError("model has no visual decoder")
        _check_dims(((w, self.cfg.l_w, "w"), (z_av, self.cfg.l_av, "z_av"), (z_v, self.cfg.l_v, "z_v")))
        return self.dec_v(torch.cat([z_v, z_av, w], dim=-1))

    def decode(self, w, z_av, z_a=None, z_v=None):
        """Per-frame means for whole sequences; w is (B, l_w), latents (B, T, l)."""
        wt = self._broadcast_w(w, z_av)
        mean_a = self.decode_audio(wt, z_av, z_a) if self.cfg.uses_audio else None
        mean_v = self.decode_visual(wt, z_av, z_v) if self.cfg.uses_visual else None
        return mean_a, mean_v

    def sample_noise(self, B, T, generator=None, dtype=None) -> dict:
        dtype = dtype or next(self.parameters()).dtype
        out = {"w": torch.randn(B, self.cfg.l_w, generator=generator, dtype=dtype)}
        for n in self.dynamic_names:
            out[n] = torch.randn(B, T, self.latent_dim(n), generator=generator, dtype=dtype)
        return out

    def zero_noise(self, B, T, dtype=None) -> dict:
        dtype = dtype or next(self.parameters()).dtype
        out = {"w": torch.zeros(B, self.cfg.l_w, dtype=dtype)}
        for n in self.dynamic_names:
            out[n] = torch.zeros(B, T, self.latent_dim(n), dtype=dtype)
        return out

    def infer(self, x_a, x_v, noise: dict) -> InferenceTrace:
        r_a, r_v = self.embed_observations(x_a, x_v)
        q_w = self.infer_w(r_a, r_v)
        w = reparameterize(q_w, noise["w"])
        trace = self.infer_dynamics(r_a, r_v, w, noise)
        trace.q_w = q_w
        return trace

    def generate(self, w, T: int, noise: Optional[dict] = None, generator=None):
        """Ancestral sampling of the dynamical latents from their learned priors."""
        if T < 1:
            raise InvalidInputError("T must be >= 1")
        if w.dim() == 1:
            w = w[None]
        B = w.shape[0]
        if noise is None:
            noise = self.sample_noise(B, T, generator=generator, dtype=w.dtype)
        z = {}
        for n in self.dynamic_names:
            net = getattr(self, n)
            h = w.new_zeros(B, net.rnn.hidden_size)
            prev = w.new_zeros(B, net.dim)
            steps = []
            for t in range(T):
                h = net.rnn(prev, h)
                prev = reparameterize(net.prior(h), noise[n][:, t])
                steps.append(prev)
            z[n] = torch.stack(steps, 1)
        mean_a, mean_v = self.decode(w, z["z_av"], z.get("z_a"), z.get("z_v"))
        return mean_a, mean_v, z


def _check_finite(block, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite activations in block {block}")


def _check_dims(items):
    for tensor, dim, name in items:
        if tensor is None or tensor.shape[-1] != dim:
            got = None if tensor is None else tuple(tensor.shape)
            raise InvalidInputError(f"{name} must have last dim {dim}, got {got}")


def elbo(model: MDVAE, x_a, x_v, noise: Optional[dict] = None, generator=None,
         kl_weight: float = 1.0, recon_weights: Optional[dict] = None,
         n_samples: int = 1) -> LossBundle:
    """Negative ELBO (minimised during training), averaged over the batch.

    Reconstruction terms are 0.5 * squared error summed over frames and
    feature dims; the Gaussian normalising constant is dropped. KL terms are
    analytic per step, conditioned on the sampled trajectory. With
    ``n_samples > 1`` (and no frozen noise) the terms are averaged over
    independent reparameterized samples.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    if n_samples > 1 and noise is None:
        runs = [elbo(model, x_a, x_v, None, generator, kl_weight, recon_weights) for _ in range(n_samples)]
        terms = {k: sum(r.terms[k] for r in runs) / n_samples for k in runs[0].terms}
        total = sum(r.total for r in runs) / n_samples
        return LossBundle(terms=terms, weights=runs[0].weights, total=total)
    cfg = model.cfg
    ref = x_a if x_a is not None else x_v
    B, T = ref.shape[:2]
    if noise is None:
        noise = model.sample_noise(B, T, generator=generator, dtype=ref.dtype)
    trace = model.infer(x_a, x_v, noise)
    mean_a, mean_v = model.decode(trace.w, trace.samples["z_av"],
                                  trace.samples.get("z_a"), trace.samples.get("z_v"))
    zero = ref.new_zeros(())
    terms = {
        "recon_a": 0.5 * ((x_a - mean_a) ** 2).sum((1, 2)).mean() if mean_a is not None else zero,
        "recon_v": 0.5 * ((x_v - mean_v) ** 2).sum((1, 2)).mean() if mean_v is not None else zero,
        "kl_w": kl_diag_gaussian(trace.q_w, DiagGaussian.standard(trace.q_w.mean.shape, ref)).mean(),
    }
    for n in ("z_av", "z_a", "z_v"):
        key = "kl_" + n[2:]
        if n in trace.posteriors:
            terms[key] = kl_diag_gaussian(trace.posteriors[n], trace.priors[n]).sum(1).mean()
        else:
            terms[key] = zero
    weights = {
        "recon_a": 1.0 if cfg.uses_audio else 0.0,
        "recon_v": 1.0 if cfg.uses_visual else 0.0,
        "kl_w": kl_weight, "kl_av": kl_weight,
        "kl_a": kl_weight if cfg.uses_audio else 0.0,
        "kl_v": kl_weight if cfg.uses_visual else 0.0,
    }
    if recon_weights:
        weights.update(recon_weights)
    total = sum(weights[k] * terms[k] for k in terms)
    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss: { {k: float(v) for k, v in terms.items()} }")
    return LossBundle(terms=terms, weights=weights, total=total)
