"""Reconstruction quality metrics for image stacks and spectra."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import convolve

from ..errors import InvalidInputError

DB_CAP = 120.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 8
LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


@dataclass
class RegionBox:
    name: str
    rows: tuple
    cols: tuple

    def __post_init__(self):
        self.rows = tuple(int(r) for r in self.rows)
        self.cols = tuple(int(c) for c in self.cols)
        if self.rows[0] >= self.rows[1] or self.cols[0] >= self.cols[1]:
            raise InvalidInputError(f"region {self.name!r} is empty")

    def check(self, height, width):
        if self.rows[0] < 0 or self.cols[0] < 0 or self.rows[1] > height or self.cols[1] > width:
            raise InvalidInputError(f"region {self.name!r} {self.rows}x{self.cols} exceeds {height}x{width}")

    def slices(self):
        return slice(*self.rows), slice(*self.cols)

    @classmethod
    def mouth(cls, side: int = 64):
        return _scaled(cls, "mouth", (40, 60), (18, 46), side)

    @classmethod
    def eyes(cls, side: int = 64):
        return _scaled(cls, "eyes", (16, 32), (10, 54), side)


def _scaled(cls, name, rows, cols, side):
    s = side / 64.0
    return cls(name, (int(rows[0] * s), int(np.ceil(rows[1] * s))),
               (int(cols[0] * s), int(np.ceil(cols[1] * s))))


@dataclass
class MetricReport:
    values: dict = field(default_factory=dict)

    def add(self, metric: str, value: float):
        self.values.setdefault(metric, []).append(float(value))

    def summary(self) -> dict:
        return {k: (float(np.mean(v)), float(np.std(v))) for k, v in self.values.items()}

    def count(self, metric: str) -> int:
        return len(self.values.get(metric, []))


def _as_stack(x):
    """Accept (H, W), (N, H, W) or (N, H, W, C); return (N, H, W, C) float64."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, :, :, None]
    elif arr.ndim == 3:
        arr = arr[..., None]
    elif arr.ndim != 4:
        raise InvalidInputError(f"expected an image or an image stack, got shape {arr.shape}")
    return arr


def mse(ref, est) -> float:
    return float(np.mean((np.asarray(ref, dtype=np.float64) - np.asarray(est, dtype=np.float64)) ** 2))


def psnr_from_mse(m: float, peak: float = 1.0) -> float:
    if m <= 0:
        return DB_CAP
    return float(min(DB_CAP, 10.0 * np.log10(peak ** 2 / m)))


def ssim_image(ref2d, est2d, window: int = SSIM_WINDOW, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid ``window`` x ``window`` patches (uniform weights)."""
    h, w = ref2d.shape
    win = min(window, h, w)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    a = sliding_window_view(ref2d, (win, win))
    b = sliding_window_view(est2d, (win, win))
    mu_a = a.mean(axis=(-1, -2))
    mu_b = b.mean(axis=(-1, -2))
    var_a = a.var(axis=(-1, -2))
    var_b = b.var(axis=(-1, -2))
    cov = ((a - mu_a[..., None, None]) * (b - mu_b[..., None, None])).mean(axis=(-1, -2))
    s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    return float(s.mean())


def _pearson(a, b) -> float:
    a = a.ravel() - a.mean()
    b = b.ravel() - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if np.allclose(a, b) else 0.0
    return float(a @ b / (na * nb))


def visual_metrics(ref, est, region: Optional[RegionBox] = None) -> dict:
    """MSE, PSNR, SCC and SSIM of an image stack, optionally inside a box.

    SCC is the Pearson correlation of 3x3-Laplacian high-passed images; the
    filter runs on the full frame before the region crop.
    """
    r = _as_stack(ref)
    e = _as_stack(est)
    if r.shape != e.shape:
        raise InvalidInputError(f"shape mismatch {r.shape} vs {e.shape}")
    n, h, w, c = r.shape
    hp_r = np.stack([[convolve(r[i, :, :, k], LAPLACIAN, mode="reflect") for k in range(c)] for i in range(n)])
    hp_e = np.stack([[convolve(e[i, :, :, k], LAPLACIAN, mode="reflect") for k in range(c)] for i in range(n)])
    hp_r = hp_r.transpose(0, 2, 3, 1)
    hp_e = hp_e.transpose(0, 2, 3, 1)
    if region is not None:
        region.check(h, w)
        rs, cs = region.slices()
        r, e = r[:, rs, cs], e[:, rs, cs]
        hp_r, hp_e = hp_r[:, rs, cs], hp_e[:, rs, cs]
    m = mse(r, e)
    ssim = float(np.mean([ssim_image(r[i, :, :, k], e[i, :, :, k]) for i in range(n) for k in range(c)]))
    return {"MSE": m, "PSNR": psnr_from_mse(m), "SCC": _pearson(hp_r, hp_e), "SSIM": ssim}


def sisdr(ref, est) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped at +/-120."""
    ref = np.asarray(ref, dtype=np.float64).ravel()
    est = np.asarray(est, dtype=np.float64).ravel()
    if ref.shape != est.shape:
        raise InvalidInputError("reference and estimate lengths differ")
    ref_energy = ref @ ref
    if ref_energy == 0:
        raise InvalidInputError("SI-SDR reference is all zeros")
    target = (est @ ref) / ref_energy * ref
    noise = est - target
    num, den = target @ target, noise @ noise
    if den == 0:
        return DB_CAP
    if num == 0:
        return -DB_CAP
    return float(np.clip(10.0 * np.log10(num / den), -DB_CAP, DB_CAP))


def spectral_sisdr(ref_spec, est_spec) -> float:
    """Mean SI-SDR over spectrogram rows (one value per frame)."""
    ref_spec = np.atleast_2d(ref_spec)
    est_spec = np.atleast_2d(est_spec)
    return float(np.mean([sisdr(r, e) for r, e in zip(ref_spec, est_spec)]))
