"""Forward diffusion process: noise schedules and the closed-form noising algebra.

A schedule tabulates the per-step noise variances beta[1..T] together with
alpha[t] = 1 - beta[t] and the cumulative products alpha_bar[0..T].  Steps are
1-indexed; index 0 is reserved for the clean signal (alpha_bar[0] = 1), which
removes off-by-one ambiguity between the training objective and the samplers.

All tables are kept in float64; the noising/denoising operations compute in
float64 internally and cast back to the input dtype, so the algebraic
round-trip identities hold to single-precision accuracy even at large t where
alpha_bar is tiny.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError, ContractError

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02


@dataclass(frozen=True)
class NoiseSchedule:
    """Immutable per-step noise tables, safe to share across threads.

    Arrays have length T + 1 and are addressed directly by step index:
    ``beta[t]`` is the step-t variance for t in 1..T, and ``beta[0] = 0`` so
    that ``alpha[0] = alpha_bar[0] = 1`` holds by construction.
    """

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def validate_step(self, t: int) -> None:
        if not 0 <= t <= self.T:
            raise IndexError(f"step index {t} outside [0, {self.T}]")


def make_linear_schedule(
    T: int = DEFAULT_T,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    """Build a schedule with beta interpolated linearly over both endpoints.

    With the defaults (T=1000, 1e-4..0.02) the terminal cumulative product
    alpha_bar[T] is about 4.0e-5, i.e. the signal is diffused to noise.
    """
    if T < 1:
        raise ConfigurationError(f"T must be >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    beta = np.zeros(T + 1, dtype=np.float64)
    beta[1:] = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def _gather_coeff(table: np.ndarray, t, batch: int) -> torch.Tensor:
    """Per-item float64 coefficients shaped for broadcasting over N,C,H,W."""
    idx = np.asarray(t, dtype=np.int64).reshape(-1)
    if idx.size == 1:
        idx = np.repeat(idx, batch)
    elif idx.size != batch:
        raise ContractError(f"got {idx.size} step indices for batch of {batch}")
    vals = torch.from_numpy(table[idx])
    return vals.view(batch, 1, 1, 1)


def _check_t_range(t, T: int) -> None:
    idx = np.asarray(t, dtype=np.int64).reshape(-1)
    if idx.size == 0 or idx.min() < 0 or idx.max() > T:
        raise IndexError(f"step index {t} outside [0, {T}]")


def forward_diffuse(
    x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Noise a clean batch to step t: x_t = sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps.

    ``t`` may be a single step index applied to the whole batch or a length-N
    sequence of per-item indices in [0, T].  Inputs are not modified.  The
    result is float64 (the table precision) and cast at use sites: rounding
    x_t itself to float32 would lose the low bits the inversion amplifies by
    1/sqrt(ab_t) at deep steps.
    """
    if x0.shape != eps.shape:
        raise ContractError(f"x0 shape {tuple(x0.shape)} != eps shape {tuple(eps.shape)}")
    _check_t_range(t, schedule.T)
    ab = _gather_coeff(schedule.alpha_bar, t, x0.shape[0])
    return torch.sqrt(ab) * x0.double() + torch.sqrt(1.0 - ab) * eps.double()


def predict_x0_from_eps(
    x_t: torch.Tensor, t, eps_hat: torch.Tensor, schedule: NoiseSchedule
) -> torch.Tensor:
    """Invert the forward closed form: x0_hat = (x_t - sqrt(1-ab_t)*eps_hat) / sqrt(ab_t).

    Returns float64, like :func:`forward_diffuse`.  t = 0 is rejected:
    alpha_bar[0] = 1 makes the map the identity, and a caller passing it has
    almost certainly mixed up step conventions.
    """
    if x_t.shape != eps_hat.shape:
        raise ContractError(
            f"x_t shape {tuple(x_t.shape)} != eps_hat shape {tuple(eps_hat.shape)}"
        )
    idx = np.asarray(t, dtype=np.int64).reshape(-1)
    if idx.min() < 1 or idx.max() > schedule.T:
        raise IndexError(f"step index {t} outside [1, {schedule.T}]")
    ab = _gather_coeff(schedule.alpha_bar, t, x_t.shape[0])
    return (x_t.double() - torch.sqrt(1.0 - ab) * eps_hat.double()) / torch.sqrt(ab)
