"""Phase-1 model: convolutional VAE with an 8x-compressed latent space.

Three stride-2 stages take an (N, C, H, W) image to an (N, c, H/8, W/8)
latent with c in {4, 8}; the decoder mirrors them and additionally emits a
half-resolution image so both heads can be supervised.  Encoder-to-decoder
skip connections exist but are gated by a config flag: the diffusion phase
decodes generated latents that never saw an encoder pass, so they default
to off and sampling requires them off.

Submodules use 3x3 convolutions, GroupNorm with 8 groups, and Swish (SiLU)
activations throughout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractError, NumericError
from .metrics import FeatureExtractor
from .similarity import ssim  # noqa: F401  (loss term; also part of the public surface)

logger = logging.getLogger(__name__)

COMPRESSION = 8  # three stride-2 stages
KERNEL = 3


@dataclass(frozen=True)
class VAEConfig:
    in_channels: int = 3
    latent_channels: int = 8
    base_width: int = 64
    norm_groups: int = 8
    skip_connections_enabled: bool = False

    def __post_init__(self):
        if self.latent_channels not in (4, 8):
            raise ConfigurationError(
                f"latent_channels must be 4 or 8, got {self.latent_channels}"
            )
        if self.base_width % self.norm_groups != 0 or self.base_width < self.norm_groups:
            raise ConfigurationError(
                f"base_width {self.base_width} must be a positive multiple of "
                f"norm_groups {self.norm_groups}"
            )

    @property
    def widths(self) -> tuple[int, int, int]:
        return (self.base_width, 2 * self.base_width, 4 * self.base_width)


def full_scale_vae_config(in_channels: int = 3) -> VAEConfig:
    """Full-scale 4-channel config, ~23M parameters (targets the ~24M reference
    size of the original full-scale model); desk tests never need it."""
    return VAEConfig(in_channels=in_channels, latent_channels=4, base_width=112)


@dataclass
class EncoderOutput:
    """Latent Gaussian parameters plus the encoder features skip taps feed from."""

    mu: torch.Tensor
    logvar: torch.Tensor
    skips: tuple[torch.Tensor, ...] | None = None


class ResBlock(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, KERNEL, padding=1)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, KERNEL, padding=1)

    def forward(self, x):
        h = self.conv1(F.silu(self.norm1(x)))
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class VAE(nn.Module):
    def __init__(self, config: VAEConfig):
        super().__init__()
        self.config = config
        w0, w1, w2 = config.widths
        g = config.norm_groups
        cin = config.in_channels
        z = config.latent_channels

        self.stem = nn.Conv2d(cin, w0, KERNEL, padding=1)
        self.enc_res = nn.ModuleList([ResBlock(w0, g), ResBlock(w1, g), ResBlock(w2, g)])
        self.enc_down = nn.ModuleList([
            nn.Conv2d(w0, w1, KERNEL, stride=2, padding=1),
            nn.Conv2d(w1, w2, KERNEL, stride=2, padding=1),
            nn.Conv2d(w2, w2, KERNEL, stride=2, padding=1),
        ])
        self.enc_mid = ResBlock(w2, g)
        self.enc_norm = nn.GroupNorm(g, w2)
        self.to_latent = nn.Conv2d(w2, 2 * z, KERNEL, padding=1)

        self.from_latent = nn.Conv2d(z, w2, KERNEL, padding=1)
        self.dec_mid = ResBlock(w2, g)
        self.dec_up = nn.ModuleList([
            nn.Conv2d(w2, w2, KERNEL, padding=1),
            nn.Conv2d(w2, w1, KERNEL, padding=1),
            nn.Conv2d(w1, w0, KERNEL, padding=1),
        ])
        self.dec_res = nn.ModuleList([ResBlock(w2, g), ResBlock(w1, g), ResBlock(w0, g)])
        # lateral passthroughs from encoder taps at /4, /2, /1 (training only)
        self.skip_proj = nn.ModuleList([
            nn.Conv2d(w2, w2, 1),
            nn.Conv2d(w1, w1, 1),
            nn.Conv2d(w0, w0, 1),
        ])
        self.half_head = nn.Sequential(
            nn.GroupNorm(g, w1), nn.SiLU(), nn.Conv2d(w1, cin, KERNEL, padding=1)
        )
        self.full_head = nn.Sequential(
            nn.GroupNorm(g, w0), nn.SiLU(), nn.Conv2d(w0, cin, KERNEL, padding=1)
        )

    def encode(self, x: torch.Tensor) -> EncoderOutput:
        """Image batch to latent Gaussian parameters at (H/8, W/8)."""
        if x.dim() != 4 or x.shape[1] != self.config.in_channels:
            raise ContractError(
                f"expected (N, {self.config.in_channels}, H, W) input, got {tuple(x.shape)}"
            )
        if x.shape[-2] % COMPRESSION or x.shape[-1] % COMPRESSION:
            raise ContractError(
                f"spatial dims {tuple(x.shape[-2:])} must be divisible by {COMPRESSION}"
            )
        h = self.stem(x)
        taps = []
        for res, down in zip(self.enc_res, self.enc_down):
            h = res(h)
            taps.append(h)
            h = down(h)
        h = self.enc_mid(h)
        h = self.to_latent(F.silu(self.enc_norm(h)))
        mu, logvar = h.chunk(2, dim=1)
        # decoder consumes taps coarsest-first: (/4, /2, /1)
        return EncoderOutput(mu=mu, logvar=logvar, skips=(taps[2], taps[1], taps[0]))

    def decode(self, z: torch.Tensor, skips=None):
        """Latent to (full, half) images, both tanh-bounded to [-1, 1].

        Encoder skip features are consulted only when the config enables them
        and the caller passes them; a generated latent decodes from z alone.
        """
        if z.dim() != 4 or z.shape[1] != self.config.latent_channels:
            raise ContractError(
                f"expected (N, {self.config.latent_channels}, h, w) latent, "
                f"got {tuple(z.shape)}"
            )
        use_skips = self.config.skip_connections_enabled and skips is not None
        h = self.dec_mid(self.from_latent(z))
        half = None
        for i, (up, res) in enumerate(zip(self.dec_up, self.dec_res)):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            if use_skips:
                h = h + self.skip_proj[i](skips[i])
            h = res(h)
            if i == 1:
                half = torch.tanh(self.half_head(h))
        full = torch.tanh(self.full_head(h))
        return full, half

    def reparameterize(self, enc: EncoderOutput, seed) -> torch.Tensor:
        return reparameterize(enc, seed)

    def forward(self, x: torch.Tensor, seed):
        enc = self.encode(x)
        z = reparameterize(enc, seed)
        full, half = self.decode(z, skips=enc.skips)
        return full, half, enc


def reparameterize(enc: EncoderOutput, seed) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * n with n drawn from the seeded source."""
    gen = seed if isinstance(seed, torch.Generator) else torch.Generator().manual_seed(seed)
    n = torch.randn(enc.mu.shape, generator=gen, dtype=enc.mu.dtype)
    return enc.mu + torch.exp(0.5 * enc.logvar) * n


def kl_loss(enc: EncoderOutput) -> torch.Tensor:
    """Mean KL divergence per element against a standard normal; >= 0."""
    if enc.mu.shape != enc.logvar.shape:
        raise ContractError(
            f"mu shape {tuple(enc.mu.shape)} != logvar shape {tuple(enc.logvar.shape)}"
        )
    value = (-0.5 * (1.0 + enc.logvar - enc.mu**2 - torch.exp(enc.logvar))).mean()
    if not torch.isfinite(value):
        raise NumericError("kl_loss is non-finite")
    return value


# ---------------------------------------------------------------------------
# adversarial critic and compound reconstruction loss


@dataclass(frozen=True)
class LossWeights:
    lambda_l1: float = 1.0
    lambda_perceptual: float = 1.0
    lambda_ssim: float = 1.0
    lambda_adv: float = 0.1
    lambda_kl: float = 1e-6

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not (math.isfinite(value) and value >= 0.0):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {value}")


class PatchDiscriminator(nn.Module):
    """Convolutional critic emitting a grid of per-patch real/fake logits.

    The default depth of three stride-2 stages gives a ~70 px receptive
    field; shrink ``depth`` for images too small to support it.
    """

    def __init__(self, in_channels: int = 3, base_width: int = 64, depth: int = 3,
                 norm_groups: int = 8, kernel_size: int = 4):
        super().__init__()
        k, p = kernel_size, (kernel_size - 1) // 2
        layers = [nn.Conv2d(in_channels, base_width, k, stride=2, padding=p),
                  nn.LeakyReLU(0.2)]
        c = base_width
        for _ in range(depth - 1):
            layers += [nn.Conv2d(c, 2 * c, k, stride=2, padding=p),
                       nn.GroupNorm(norm_groups, 2 * c), nn.LeakyReLU(0.2)]
            c *= 2
        layers += [nn.Conv2d(c, 2 * c, k, stride=1, padding=p),
                   nn.GroupNorm(norm_groups, 2 * c), nn.LeakyReLU(0.2)]
        layers += [nn.Conv2d(2 * c, 1, k, stride=1, padding=p)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


def adversarial_losses(discriminator: nn.Module, real: torch.Tensor, fake: torch.Tensor):
    """Non-saturating BCE over patch logits: (critic loss, generator loss).

    The critic loss averages the real-as-real and fake-as-fake terms; the
    generator loss scores fake-as-real.  Detaching for the alternating
    update schedule is the caller's business.
    """
    if real.shape != fake.shape:
        raise ContractError(f"shapes differ: {tuple(real.shape)} vs {tuple(fake.shape)}")
    logits_real = discriminator(real)
    logits_fake = discriminator(fake)
    ones = torch.ones_like(logits_real)
    zeros = torch.zeros_like(logits_fake)
    d_loss = 0.5 * (
        F.binary_cross_entropy_with_logits(logits_real, ones)
        + F.binary_cross_entropy_with_logits(logits_fake, zeros)
    )
    g_loss = F.binary_cross_entropy_with_logits(logits_fake, torch.ones_like(logits_fake))
    return d_loss, g_loss


_perceptual_notice_shown = False


def reconstruction_loss(
    pred_full: torch.Tensor,
    pred_half: torch.Tensor,
    target: torch.Tensor,
    weights: LossWeights,
    discriminator: nn.Module | None = None,
    perceptual: FeatureExtractor | None = None,
    ssim_window: int = 11,
) -> torch.Tensor:
    """Multi-resolution compound loss over the full and half decoder heads.

    Per resolution: L1 + perceptual feature distance + (1 - SSIM) + the
    adversarial generator term, each with its weight.  The half-resolution
    target is the 2x2 area average of ``target``.  A missing perceptual
    extractor skips that term with a one-time logged notice; a missing
    discriminator with lambda_adv > 0 is a configuration error.
    """
    global _perceptual_notice_shown
    if pred_full.shape != target.shape:
        raise ContractError(
            f"prediction shape {tuple(pred_full.shape)} != target {tuple(target.shape)}"
        )
    expected_half = (*target.shape[:2], target.shape[2] // 2, target.shape[3] // 2)
    if tuple(pred_half.shape) != expected_half:
        raise ContractError(
            f"half prediction shape {tuple(pred_half.shape)} != {expected_half}"
        )
    if weights.lambda_adv > 0.0 and discriminator is None:
        raise ConfigurationError("lambda_adv > 0 requires a discriminator")
    if weights.lambda_perceptual > 0.0 and perceptual is None and not _perceptual_notice_shown:
        logger.warning("no perceptual extractor configured; skipping the perceptual term")
        _perceptual_notice_shown = True

    target_half = F.avg_pool2d(target, 2)
    total = pred_full.new_zeros(())
    for pred, tgt in ((pred_full, target), (pred_half, target_half)):
        if weights.lambda_l1 > 0.0:
            total = total + weights.lambda_l1 * (pred - tgt).abs().mean()
        if weights.lambda_perceptual > 0.0 and perceptual is not None:
            diff = perceptual.features_torch(pred) - perceptual.features_torch(tgt)
            total = total + weights.lambda_perceptual * (diff**2).mean()
        if weights.lambda_ssim > 0.0:
            total = total + weights.lambda_ssim * (1.0 - ssim(pred, tgt, window_size=ssim_window))
        if weights.lambda_adv > 0.0:
            _, g_loss = adversarial_losses(discriminator, tgt, pred)
            total = total + weights.lambda_adv * g_loss
    return total
