"""latentgen: two-phase latent diffusion image synthesis and evaluation.

Phase 1 compresses images 8x per axis into a small latent with a VAE; phase
2 trains a class-conditional UNet to denoise that latent space and samples
from it with DDIM.  The metrics package scores generators with FID,
k-NN-manifold precision/recall, MS-SSIM, and MSE over pluggable feature
extractors.
"""

from .autoencoder import (
    VAE,
    EncoderOutput,
    LossWeights,
    PatchDiscriminator,
    VAEConfig,
    adversarial_losses,
    kl_loss,
    full_scale_vae_config,
    reconstruction_loss,
    reparameterize,
)
from .checkpoints import Checkpoint, load_checkpoint, save_checkpoint
from .datapipe import (
    DatasetManifest,
    ReferenceBatch,
    ToyShapesConfig,
    build_reference_batch,
    gen_toy_dataset,
    gen_toy_shapes,
    load_manifest,
    preprocess,
    relabel,
)
from .denoiser import UNet, UNetConfig, diffusion_loss, sinusoidal_time_embedding
from .errors import (
    ConfigurationError,
    ContractError,
    ManifestError,
    NumericError,
    TrainingDiverged,
)
from .harness import (
    Pipeline,
    TrainConfig,
    channel_study,
    eval_generation,
    eval_reconstruction,
    load_pipeline,
    steps_sweep,
    train_phase1,
    train_phase2,
)
from .metrics import (
    ConvFeatures,
    FeatureExtractor,
    GaussianStats,
    MetricReport,
    PixelFeatures,
    PRConfig,
    fid,
    fit_gaussian,
    frechet_distance,
    improved_precision_recall,
    knn_radii,
    matrix_sqrt,
    mse,
)
from .sampler import SamplerConfig, ddim_sample, ddim_step, ddpm_sample, generate, make_substeps
from .schedules import NoiseSchedule, forward_diffuse, make_linear_schedule, predict_x0_from_eps
from .similarity import ms_ssim, ssim

__version__ = "0.1.0"
