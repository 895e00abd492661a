"""Windowed structural similarity (SSIM) and its multi-scale extension.

Both functions are differentiable torch computations so they can serve as
reconstruction-loss terms as well as evaluation metrics.  Images are NCHW;
the default ``data_range`` of 2.0 matches the [-1, 1] pixel convention used
throughout the package.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .errors import ContractError

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> torch.Tensor:
    """1-D Gaussian kernel normalized to sum 1, shape (size,)."""
    coords = torch.arange(size, dtype=torch.float64) - (size - 1) / 2.0
    g = torch.exp(-(coords**2) / (2.0 * sigma**2))
    return g / g.sum()


def _blur(x: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # Separable valid-mode Gaussian filter, one group per channel.
    c = x.shape[1]
    w = win.to(dtype=x.dtype)
    kh = w.view(1, 1, -1, 1).repeat(c, 1, 1, 1)
    kw = w.view(1, 1, 1, -1).repeat(c, 1, 1, 1)
    return F.conv2d(F.conv2d(x, kh, groups=c), kw, groups=c)


def _check_pair(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ContractError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.dim() != 4:
        raise ContractError(f"expected NCHW images, got {a.dim()}-d input")


def _ssim_terms(a, b, win, k1, k2, data_range):
    """Mean SSIM and mean contrast-structure term over all windows."""
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _blur(a, win)
    mu_b = _blur(b, win)
    var_a = _blur(a * a, win) - mu_a * mu_a
    var_b = _blur(b * b, win) - mu_b * mu_b
    cov = _blur(a * b, win) - mu_a * mu_b
    luminance = (2.0 * mu_a * mu_b + c1) / (mu_a * mu_a + mu_b * mu_b + c1)
    cs = (2.0 * cov + c2) / (var_a + var_b + c2)
    return (luminance * cs).mean(), cs.mean()


def ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 2.0,
) -> torch.Tensor:
    """Mean SSIM over all Gaussian windows; symmetric, in [-1, 1], 1 iff a == b."""
    _check_pair(a, b)
    if min(a.shape[-2:]) < window_size:
        raise ContractError(
            f"spatial dims {tuple(a.shape[-2:])} smaller than window {window_size}"
        )
    win = gaussian_window(window_size, sigma)
    value, _ = _ssim_terms(a, b, win, k1, k2, data_range)
    return value


def _max_scales(min_dim: int, window_size: int) -> int:
    s = 0
    while min_dim >= window_size:
        s += 1
        min_dim //= 2
    return s


def ms_ssim(
    a: torch.Tensor,
    b: torch.Tensor,
    weights: tuple[float, ...] = MS_SSIM_WEIGHTS,
    window_size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = 2.0,
    scales: int | None = None,
) -> torch.Tensor:
    """Multi-scale SSIM: weighted product of per-scale contrast/structure terms.

    The image pair is repeatedly 2x average-pooled; every scale contributes
    its contrast/structure term and the coarsest scale additionally the
    luminance term.  When ``scales`` is None the largest feasible scale count
    (capped at len(weights)) is used and the leading weights are renormalized,
    which is how small desk-scale images are handled.  Explicitly requesting
    more scales than the image supports is an error.
    """
    _check_pair(a, b)
    feasible = _max_scales(min(a.shape[-2:]), window_size)
    if feasible < 1:
        raise ContractError(
            f"spatial dims {tuple(a.shape[-2:])} smaller than window {window_size}"
        )
    if scales is None:
        scales = min(len(weights), feasible)
    elif not 1 <= scales <= len(weights):
        raise ContractError(f"scales must be in [1, {len(weights)}], got {scales}")
    elif scales > feasible:
        raise ContractError(
            f"{scales} scales need min dim >= {window_size * 2 ** (scales - 1)}, "
            f"got {min(a.shape[-2:])}"
        )
    w = torch.tensor(weights[:scales], dtype=torch.float64)
    w = w / w.sum()

    win = gaussian_window(window_size, sigma)
    terms = []
    for level in range(scales):
        value, cs = _ssim_terms(a, b, win, k1, k2, data_range)
        terms.append(value if level == scales - 1 else cs)
        if level < scales - 1:
            a = F.avg_pool2d(a, kernel_size=2)
            b = F.avg_pool2d(b, kernel_size=2)
    result = torch.ones((), dtype=terms[0].dtype)
    for term, weight in zip(terms, w):
        result = result * torch.clamp(term, min=0.0) ** weight.to(term.dtype)
    return result
