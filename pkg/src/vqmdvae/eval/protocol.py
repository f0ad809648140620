"""Attribute-track protocol for latent swaps, with ridge-based extractors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.linear_model import LogisticRegression, Ridge

from ..errors import InvalidInputError

N_B = 50
FACTOR_NAMES = ("c", "a", "v")


def centered_pcc(x, y) -> float:
    """Pearson correlation after per-track mean centering, pooled over dims."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"track shapes differ: {x.shape} vs {y.shape}")
    x = x - x.mean(0)
    y = y - y.mean(0)
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        return 1.0 if np.allclose(x, y) else 0.0
    return float((x * y).sum() / (nx * ny))


def mae(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidInputError(f"track shapes differ: {x.shape} vs {y.shape}")
    return float(np.abs(x - y).mean())


@dataclass
class FactorExtractor:
    """Ridge maps from per-frame observations to ground-truth factor tracks.

    ``sources`` says which modality each factor is read from: the shared
    factor from both, the specific ones from their own modality.
    """

    alpha: float = 1e-3
    log_audio: bool = False
    models: dict = field(default_factory=dict)
    sources: dict = field(default_factory=lambda: {"c": "av", "a": "a", "v": "v"})

    def _inputs(self, x_a, x_v, factor):
        src = self.sources[factor]
        parts = []
        if "a" in src:
            x_a = np.asarray(x_a, dtype=np.float64)
            parts.append(np.log(np.maximum(x_a, 1e-10)) if self.log_audio else x_a)
        if "v" in src:
            parts.append(np.asarray(x_v, dtype=np.float64))
        return np.concatenate(parts, axis=-1)

    def fit(self, corpus) -> "FactorExtractor":
        x_a, x_v = corpus.stacked()
        self.log_audio = corpus.spec.mode == "raw-like"
        facs = corpus.factors()
        for name in FACTOR_NAMES:
            y = np.concatenate([np.asarray(getattr(f, name)).reshape(len(f.c), -1) for f in facs])
            x = self._inputs(x_a, x_v, name)
            x = x.reshape(-1, x.shape[-1])
            self.models[name] = Ridge(alpha=self.alpha).fit(x, y)
        return self

    def __call__(self, seq, factor="c") -> np.ndarray:
        if factor not in self.models:
            raise InvalidInputError(f"extractor not fitted for factor {factor!r}")
        return self.models[factor].predict(self._inputs(seq.x_a, seq.x_v, factor))


@dataclass
class StaticClassifier:
    """Logistic regression on time-averaged observations -> static class."""

    model: object = None

    @staticmethod
    def _pool(x_a, x_v):
        return np.concatenate([np.asarray(x_a).mean(-2), np.asarray(x_v).mean(-2)], axis=-1)

    def fit(self, corpus, kind="s_cls") -> "StaticClassifier":
        x_a, x_v = corpus.stacked()
        self.model = LogisticRegression(max_iter=5000).fit(self._pool(x_a, x_v), corpus.labels(kind))
        return self

    def predict(self, seqs) -> np.ndarray:
        x = np.stack([self._pool(s.x_a, s.x_v) for s in seqs])
        return self.model.predict(x)


def swap_protocol(model, corpus, variable, extractor, n_repeats=5, n_b=N_B, seed=0,
                  factors=FACTOR_NAMES):
    """Rebuild ``n_b`` sequences B with ``variable`` taken from a sequence A.

    For each repeat and factor the output tracks are compared with A's track
    (from ``extractor`` applied to A's observations): PCC after centering,
    MAE on raw tracks. Returns ``{factor: {"PCC": mean, "MAE": mean}}``.
    """
    from ..transform import SwapSpec, analyze_batch, resynthesize_batch, swap

    spec = SwapSpec({variable})
    seqs = corpus.features()
    n = len(seqs)
    if n < 2:
        raise InvalidInputError("swap protocol needs at least two sequences")
    n_b = min(n_b, n - 1)
    rng = np.random.default_rng(seed)
    x_a, x_v = corpus.stacked()
    bundles = analyze_batch(x_a, x_v, model)
    scores = {f: {"PCC": [], "MAE": []} for f in factors}
    for _ in range(n_repeats):
        ia = int(rng.integers(n))
        others = np.delete(np.arange(n), ia)
        ib = rng.choice(others, size=n_b, replace=False)
        hybrids = [swap(bundles[int(j)], bundles[ia], spec) for j in ib]
        outputs = resynthesize_batch(hybrids, model, mode="raw" if _raw(model) else "feature")
        for f in factors:
            try:
                ref = extractor(seqs[ia], f)
                tracks = [extractor(o, f) for o in outputs]
            except Exception as exc:
                sid = seqs[ia].meta.get("id", ia)
                raise InvalidInputError(f"attribute extraction failed for sequence {sid}: {exc}") from exc
            scores[f]["PCC"].append(np.mean([centered_pcc(t, ref) for t in tracks]))
            scores[f]["MAE"].append(np.mean([mae(t, ref) for t in tracks]))
    return {f: {k: float(np.mean(v)) for k, v in d.items()} for f, d in scores.items()}


def _raw(model) -> bool:
    return bool(getattr(model, "has_vq", False))
