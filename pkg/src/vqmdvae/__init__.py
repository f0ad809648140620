"""Two-stage VQ-MDVAE: VQ-VAE compression plus a multimodal dynamical VAE."""

from .errors import (ConfigurationError, ContainerError, InvalidInputError, MissingTensorError,
                     NumericError, StratificationError, TrainingDiverged, UnrecognizedContainerError,
                     VQMDVAEError)
from .features import (AVFeatureSequence, RawAVSequence, SyntheticCorpus, SyntheticFactorSpec,
                       generate_synthetic, load_corpus, preprocess_frames, save_corpus,
                       stft_power_spectrogram)
from .mdvae import MDVAE, DiagGaussian, LatentBundle, ModelConfig, elbo, kl_diag_gaussian
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .train import TrainConfig, train_stage1, train_stage2
from .transform import Pipeline, SwapSpec, analyze, corrupt, denoise, interpolate_w, resynthesize, swap
from .vq import VQVAE, Codebook, VQConfig, ema_update, is_divergence, quantize, stage1_loss

__version__ = "0.1.0"
