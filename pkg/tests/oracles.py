"""Independent reference implementations used to freeze expected values.

Everything here is deliberately written along a different computational
route than the library (scalar loops, exact rational arithmetic, brute-force
enumeration) so tests compare two independent derivations.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np
import torch
from torch import nn


def alpha_bar_exact(betas: np.ndarray) -> Fraction:
    """Exact rational product of (1 - beta_t) over the given float betas."""
    acc = Fraction(1)
    for b in betas:
        acc *= 1 - Fraction(float(b))
    return acc


def central_diff_grad(fn, x: torch.Tensor, h: float) -> torch.Tensor:
    """Central finite-difference gradient of scalar fn at x, coordinate by coordinate."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            f_plus = float(fn(x))
            flat[i] = orig - h
            f_minus = float(fn(x))
            flat[i] = orig
            gflat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def rel_grad_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    denom = max(float(numeric.norm()), 1e-12)
    return float((analytic - numeric).norm()) / denom


def gaussian_window_2d(size: int, sigma: float) -> np.ndarray:
    g = np.array([
        math.exp(-((i - (size - 1) / 2.0) ** 2) / (2.0 * sigma**2)) for i in range(size)
    ])
    g = g / g.sum()
    return np.outer(g, g)


def ssim_scalar(a: np.ndarray, b: np.ndarray, window_size: int = 11, sigma: float = 1.5,
                k1: float = 0.01, k2: float = 0.03, data_range: float = 2.0):
    """Windowed SSIM by explicit window sums; returns (mean ssim, mean cs)."""
    assert a.shape == b.shape and a.ndim == 4
    win = gaussian_window_2d(window_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    ssim_vals, cs_vals = [], []
    n_items, n_ch, h, w = a.shape
    for n in range(n_items):
        for c in range(n_ch):
            for i in range(h - window_size + 1):
                for j in range(w - window_size + 1):
                    pa = a[n, c, i: i + window_size, j: j + window_size]
                    pb = b[n, c, i: i + window_size, j: j + window_size]
                    mu_a = float((win * pa).sum())
                    mu_b = float((win * pb).sum())
                    var_a = float((win * pa * pa).sum()) - mu_a * mu_a
                    var_b = float((win * pb * pb).sum()) - mu_b * mu_b
                    cov = float((win * pa * pb).sum()) - mu_a * mu_b
                    lum = (2 * mu_a * mu_b + c1) / (mu_a**2 + mu_b**2 + c1)
                    cs = (2 * cov + c2) / (var_a + var_b + c2)
                    ssim_vals.append(lum * cs)
                    cs_vals.append(cs)
    return float(np.mean(ssim_vals)), float(np.mean(cs_vals))


def block_average_2x(x: np.ndarray) -> np.ndarray:
    """2x2 block mean over the last two axes, truncating odd edges."""
    h, w = x.shape[-2] // 2 * 2, x.shape[-1] // 2 * 2
    x = x[..., :h, :w]
    return (x[..., 0::2, 0::2] + x[..., 0::2, 1::2]
            + x[..., 1::2, 0::2] + x[..., 1::2, 1::2]) / 4.0


def ms_ssim_scalar(a: np.ndarray, b: np.ndarray, weights, window_size: int = 11,
                   sigma: float = 1.5, data_range: float = 2.0) -> float:
    """Multi-scale SSIM over len(weights) scales via the scalar SSIM oracle."""
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    result = 1.0
    for level in range(len(w)):
        value, cs = ssim_scalar(a, b, window_size, sigma, data_range=data_range)
        term = value if level == len(w) - 1 else cs
        result *= max(term, 0.0) ** w[level]
        if level < len(w) - 1:
            a = block_average_2x(a)
            b = block_average_2x(b)
    return result


def dist_scalar(p, q) -> float:
    s = 0.0
    for pi, qi in zip(p, q):
        d = float(pi) - float(qi)
        s += d * d
    return math.sqrt(s)


def knn_radii_bruteforce(points: np.ndarray, k: int) -> list[float]:
    n = points.shape[0]
    radii = []
    for i in range(n):
        dists = sorted(dist_scalar(points[i], points[j]) for j in range(n) if j != i)
        radii.append(dists[k - 1])
    return radii


def pr_bruteforce(real: np.ndarray, gen: np.ndarray, k: int) -> tuple[float, float]:
    real_radii = knn_radii_bruteforce(real, k)
    gen_radii = knn_radii_bruteforce(gen, k)
    covered_gen = sum(
        1 for j in range(gen.shape[0])
        if any(dist_scalar(gen[j], real[i]) <= real_radii[i] for i in range(real.shape[0]))
    )
    covered_real = sum(
        1 for i in range(real.shape[0])
        if any(dist_scalar(real[i], gen[j]) <= gen_radii[j] for j in range(gen.shape[0]))
    )
    return covered_gen / gen.shape[0], covered_real / real.shape[0]


def fit_gaussian_twopass(features: np.ndarray):
    """Two-pass scalar mean/covariance with the N-1 divisor."""
    n, d = features.shape
    mu = [sum(float(features[i, j]) for i in range(n)) / n for j in range(d)]
    sigma = np.zeros((d, d))
    for a in range(d):
        for b in range(d):
            s = sum(
                (float(features[i, a]) - mu[a]) * (float(features[i, b]) - mu[b])
                for i in range(n)
            )
            sigma[a, b] = s / (n - 1)
    return np.array(mu), sigma


# ---------------------------------------------------------------------------
# independently trained toy classifier (conditional-generation oracle)


class ToyClassifier(nn.Module):
    def __init__(self, num_classes: int = 2):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(32, num_classes),
        )

    def forward(self, x):
        return self.net(x)


def train_toy_classifier(images: torch.Tensor, labels: torch.Tensor,
                         steps: int = 300, seed: int = 123) -> ToyClassifier:
    torch.manual_seed(seed)
    model = ToyClassifier()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(steps):
        idx = torch.randint(0, images.shape[0], (32,), generator=gen)
        logits = model(images[idx])
        loss = nn.functional.cross_entropy(logits, labels[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    return model


def classify(model: ToyClassifier, images: torch.Tensor) -> torch.Tensor:
    with torch.no_grad():
        return model(images).argmax(dim=1)
