from .metrics import MetricReport, RegionBox, mse, psnr_from_mse, sisdr, spectral_sisdr, ssim_image, visual_metrics
from .pca import pca_project
from .probe import MLP_HIDDEN, Probe, ProbeReport, fit_probe, train_probe
from .protocol import FactorExtractor, StaticClassifier, centered_pcc, mae, swap_protocol
from .transport import SinkhornConvergenceWarning, TransportResult, ot_domain_adapt, ot_plan, sinkhorn

__all__ = [
    "MetricReport", "RegionBox", "mse", "psnr_from_mse", "sisdr", "spectral_sisdr", "ssim_image",
    "visual_metrics", "pca_project", "MLP_HIDDEN", "Probe", "ProbeReport", "fit_probe", "train_probe",
    "FactorExtractor", "StaticClassifier", "centered_pcc", "mae", "swap_protocol",
    "SinkhornConvergenceWarning", "TransportResult", "ot_domain_adapt", "ot_plan", "sinkhorn",
]
