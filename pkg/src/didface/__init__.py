"""Two-stage latent diffusion face restoration with a manifold information bottleneck."""

from .codec import Codec, CodecConfig, DiagonalGaussian, QCStats, compute_qc_stats, load_codec, save_codec, train_codec
from .control import ControlBranch, ControlledDenoiser, UNet, adain_modulate, init_control_branch
from .degradation import DegradationParams, degrade, sample_params
from .diffusion import NoiseSchedule, ddpm_sample, ldm_loss, make_schedule, predict_z0, q_sample, spaced_timesteps
from .errors import ConfigurationError, DidFaceError, DomainError, ParameterError, ShapeError, ValidationError
from .identity import IdentityEmbedder, cosine_similarity
from .metrics import evaluate, id_similarity, psnr, ssim
from .mib import InformationBottleneck, MIBConfig, fuse, info_loss, rec_loss
from .pipeline import DeskConfig, run_pipeline
from .trainer import StageCheckpoint, TrainConfig, restore, synthesize_stage1, train_stage1, train_stage2

__version__ = "0.1.0"
