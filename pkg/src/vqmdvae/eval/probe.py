"""Linear and MLP classifiers trained on frozen latent features."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import f1_score
from sklearn.model_selection import GroupKFold

from ..errors import InvalidInputError, StratificationError

MLP_HIDDEN = 64


@dataclass
class Probe:
    kind: str
    input_dim: int
    n_classes: int
    net: nn.Module = field(repr=False)
    mean: np.ndarray = field(repr=False)
    scale: np.ndarray = field(repr=False)

    @property
    def n_params(self) -> int:
        return sum(p.numel() for p in self.net.parameters())

    def predict(self, features) -> np.ndarray:
        x = (np.asarray(features, dtype=np.float64) - self.mean) / self.scale
        with torch.no_grad():
            logits = self.net(torch.as_tensor(x, dtype=torch.float32))
        return logits.argmax(1).numpy()


@dataclass
class ProbeReport:
    kind: str
    split: str
    accuracy: float
    f1_macro: float
    n_params: int
    folds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "split": self.split, "accuracy": self.accuracy,
                "f1_macro": self.f1_macro, "n_params": self.n_params}


def build_probe_net(kind: str, input_dim: int, n_classes: int) -> nn.Module:
    """MLR is one linear layer; softmax lives in the cross-entropy loss."""
    if kind == "MLR":
        return nn.Linear(input_dim, n_classes)
    if kind == "MLP":
        return nn.Sequential(
            nn.Linear(input_dim, MLP_HIDDEN), nn.ReLU(),
            nn.Linear(MLP_HIDDEN, MLP_HIDDEN), nn.ReLU(),
            nn.Linear(MLP_HIDDEN, n_classes),
        )
    raise InvalidInputError(f"unknown probe kind {kind!r}")


def fit_probe(features, labels, kind="MLR", n_classes=None, seed=0, epochs=500,
              lr=1e-2, weight_decay=1e-4) -> Probe:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise InvalidInputError("features must be N x d with one label per row")
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    if len(x) < n_classes:
        raise InvalidInputError(f"{len(x)} samples cannot cover {n_classes} classes")
    mean = x.mean(0)
    scale = x.std(0)
    scale[scale == 0] = 1.0
    xt = torch.as_tensor((x - mean) / scale, dtype=torch.float32)
    yt = torch.as_tensor(y)
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        net = build_probe_net(kind, x.shape[1], n_classes)
    finally:
        torch.random.set_rng_state(gen_state)
    opt = torch.optim.Adam(net.parameters(), lr=lr, weight_decay=weight_decay)
    # full-batch training keeps the fit deterministic for a fixed seed
    for _ in range(epochs):
        opt.zero_grad()
        F.cross_entropy(net(xt), yt).backward()
        opt.step()
    net.eval()
    return Probe(kind, x.shape[1], n_classes, net, mean, scale)


def _check_classes(y_train, n_classes):
    missing = sorted(set(range(n_classes)) - set(np.unique(y_train).tolist()))
    if missing:
        raise StratificationError(f"classes {missing} are absent from the training split")


def _score(probe, x, y):
    pred = probe.predict(x)
    return float((pred == y).mean()), float(f1_score(y, pred, average="macro", zero_division=0))


def train_probe(features, labels, kind="MLR", split="person-dependent", groups=None,
                n_classes=None, seed=0, test_fraction=0.3, n_folds=5, adapt=None, **fit_kw):
    """Fit a probe and score it on held-out data.

    ``person-dependent``: one random 70/30 split. ``person-independent``:
    ``n_folds``-fold cross-validation with folds formed by identity
    (``groups``); the reported numbers are fold averages. ``adapt`` is an
    optional ``(train_x, test_x) -> mapped test_x`` hook, e.g. optimal-transport
    alignment of unseen identities onto the training distribution.
    Returns (probe, report); for cross-validation the probe is the last fold's.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    n_classes = int(y.max()) + 1 if n_classes is None else n_classes
    if len(x) < n_classes:
        raise InvalidInputError(f"{len(x)} samples cannot cover {n_classes} classes")
    if split == "person-dependent":
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(x))
        n_test = int(round(test_fraction * len(x)))
        test, train = perm[:n_test], perm[n_test:]
        _check_classes(y[train], n_classes)
        probe = fit_probe(x[train], y[train], kind, n_classes, seed, **fit_kw)
        acc, f1 = _score(probe, x[test], y[test])
        return probe, ProbeReport(kind, split, acc, f1, probe.n_params)
    if split == "person-independent":
        if groups is None:
            raise InvalidInputError("person-independent split needs identity groups")
        groups = np.asarray(groups)
        if len(np.unique(groups)) < n_folds:
            raise StratificationError(
                f"{len(np.unique(groups))} identities cannot fill {n_folds} person-independent folds")
        folds = []
        probe = None
        for train, test in GroupKFold(n_splits=n_folds).split(x, y, groups):
            _check_classes(y[train], n_classes)
            probe = fit_probe(x[train], y[train], kind, n_classes, seed, **fit_kw)
            x_test = adapt(x[train], x[test]) if adapt is not None else x[test]
            folds.append(_score(probe, x_test, y[test]))
        acc = float(np.mean([f[0] for f in folds]))
        f1 = float(np.mean([f[1] for f in folds]))
        return probe, ProbeReport(kind, split, acc, f1, probe.n_params, folds)
    raise InvalidInputError(f"unknown split {split!r}")
