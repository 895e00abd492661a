"""Reverse diffusion: DDIM over a timestep subsequence, plus an ancestral sampler.

DDIM walks a strictly increasing substep list tau_1 < ... < tau_S (default
150 steps of the 1000-step schedule, uniformly spaced) and is deterministic
at eta = 0.  The full-length ancestral sampler is kept as an independent
cross-check: its posterior standard deviation equals the DDIM sigma at
eta = 1 on consecutive steps.

Coefficient algebra runs in float64 against the schedule tables and the
result is cast back to the latent dtype, matching the forward-process
conventions in :mod:`latentgen.schedules`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError, ContractError
from .schedules import NoiseSchedule, predict_x0_from_eps

DEFAULT_STEPS = 150


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = DEFAULT_STEPS
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigurationError(f"eta must be in [0, 1], got {self.eta}")


def make_substeps(T: int, S: int) -> list[int]:
    """Uniformly spaced step indices tau_i = round(i * T / S), ending at T."""
    if not 1 <= S <= T:
        raise ConfigurationError(f"need 1 <= S <= T, got S={S}, T={T}")
    taus = [math.floor(i * T / S + 0.5) for i in range(1, S + 1)]
    for a, b in zip(taus, taus[1:]):
        if b <= a:
            raise ConfigurationError(f"substep collision at {a}: S={S} too dense for T={T}")
    return taus


def ddim_sigma(schedule: NoiseSchedule, t_cur: int, t_prev: int, eta: float) -> float:
    ab_cur = schedule.alpha_bar[t_cur]
    ab_prev = schedule.alpha_bar[t_prev]
    return eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_cur)) * math.sqrt(
        1.0 - ab_cur / ab_prev
    )


def ddim_step(
    x_t: torch.Tensor,
    eps_hat: torch.Tensor,
    t_cur: int,
    t_prev: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    noise: torch.Tensor | None = None,
) -> torch.Tensor:
    """One reverse step tau_i -> tau_{i-1}.

    x_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev - sigma^2) * eps_hat
             + sigma * noise,
    with x0_hat recovered from the forward closed form and sigma scaled by
    eta (zero means the noise argument is ignored).  t_prev = 0 lands on the
    clean-signal convention ab_0 = 1, making the final step return x0_hat.
    """
    if not 0 <= t_prev < t_cur <= schedule.T:
        raise ContractError(f"need 0 <= t_prev < t_cur <= T, got ({t_prev}, {t_cur})")
    x0_hat = predict_x0_from_eps(x_t, t_cur, eps_hat, schedule)
    ab_prev = schedule.alpha_bar[t_prev]
    sigma = ddim_sigma(schedule, t_cur, t_prev, eta)
    x_prev = (
        math.sqrt(ab_prev) * x0_hat.double()
        + math.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps_hat.double()
    )
    if eta > 0.0:
        if noise is None:
            raise ContractError("eta > 0 requires a noise batch")
        x_prev = x_prev + sigma * noise.double()
    return x_prev.to(x_t.dtype)


def _expand_label(label, n: int) -> torch.Tensor:
    lab = torch.as_tensor(label, dtype=torch.int64).reshape(-1)
    return lab.expand(n) if lab.numel() == 1 else lab


def ddim_sample(
    model,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    label,
    n: int,
    latent_shape: tuple[int, int, int],
) -> torch.Tensor:
    """Sample n latents by DDIM from seeded standard-normal x_T.

    ``model(z, t, label) -> eps_hat`` is typically a trained UNet.  With
    eta = 0 the whole trajectory is a deterministic function of (weights,
    seed, label, steps).
    """
    gen = torch.Generator().manual_seed(cfg.seed)
    x = torch.randn(n, *latent_shape, generator=gen)
    label = _expand_label(label, n)
    taus = make_substeps(schedule.T, cfg.steps)
    with torch.no_grad():
        for i in reversed(range(len(taus))):
            t_cur = taus[i]
            t_prev = taus[i - 1] if i > 0 else 0
            eps_hat = model(x, t_cur, label)
            noise = (
                torch.randn(x.shape, generator=gen) if cfg.eta > 0.0 and t_prev > 0
                else None
            )
            eta = cfg.eta if t_prev > 0 else 0.0
            x = ddim_step(x, eps_hat, t_cur, t_prev, schedule, eta=eta, noise=noise)
    return x


def posterior_std(schedule: NoiseSchedule, t: int) -> float:
    """Ancestral posterior standard deviation sqrt(beta_tilde_t).

    beta_tilde_t = (1 - ab_{t-1}) / (1 - ab_t) * beta_t; with ab_0 = 1 this
    is zero at t = 1, so the last ancestral step adds no noise.
    """
    schedule.validate_step(t)
    if t < 1:
        raise ContractError(f"posterior is defined for t >= 1, got {t}")
    num = 1.0 - schedule.alpha_bar[t - 1]
    den = 1.0 - schedule.alpha_bar[t]
    return math.sqrt(num / den * schedule.beta[t])


def ddpm_sample(
    model,
    schedule: NoiseSchedule,
    seed: int,
    label,
    n: int,
    latent_shape: tuple[int, int, int],
) -> torch.Tensor:
    """Full-length ancestral sampling; retained as an oracle for DDIM."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, *latent_shape, generator=gen)
    label = _expand_label(label, n)
    with torch.no_grad():
        for t in range(schedule.T, 0, -1):
            eps_hat = model(x, t, label)
            alpha_t = schedule.alpha[t]
            ab_t = schedule.alpha_bar[t]
            mean = (x.double() - schedule.beta[t] / math.sqrt(1.0 - ab_t)
                    * eps_hat.double()) / math.sqrt(alpha_t)
            if t > 1:
                z = torch.randn(x.shape, generator=gen)
                mean = mean + posterior_std(schedule, t) * z.double()
            x = mean.to(x.dtype)
    return x


def generate(
    vae,
    unet,
    schedule: NoiseSchedule,
    cfg: SamplerConfig,
    label,
    n: int,
    image_size: int,
    latent_scale: float = 1.0,
) -> torch.Tensor:
    """End-to-end image generation: DDIM in latent space, then decode.

    The VAE must have skip connections disabled: a generated latent has no
    encoder pass to feed them.  ``latent_scale`` is the factor latents were
    multiplied by for diffusion training and is divided out before decoding.
    """
    if vae.config.skip_connections_enabled:
        raise ConfigurationError(
            "cannot generate with skip connections enabled: no encoder pass exists"
        )
    from .autoencoder import COMPRESSION

    if image_size % COMPRESSION:
        raise ContractError(f"image_size {image_size} not divisible by {COMPRESSION}")
    latent_shape = (
        vae.config.latent_channels, image_size // COMPRESSION, image_size // COMPRESSION,
    )
    z = ddim_sample(unet, schedule, cfg, label, n, latent_shape)
    with torch.no_grad():
        full, _ = vae.decode(z / latent_scale)
    return full
