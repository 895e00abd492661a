"""Quantitative evaluation of generative models.

Implements the Fréchet distance between feature-space Gaussians (FID),
k-NN-manifold precision/recall, MS-SSIM, and MSE over a pluggable feature
extractor.  Feature-space computations run in numpy float64; the extractor
descriptor is recorded in every report because all of these metrics depend
on the reference subset and the extractor in use.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .errors import ContractError, NumericError
from .similarity import ms_ssim, ssim  # noqa: F401  (re-exported)

FEATURE_MAGIC = b"LGFT\x00\x01"


# ---------------------------------------------------------------------------
# feature extractors


class FeatureExtractor:
    """Deterministic map from an NCHW image batch to an (N, D) feature matrix.

    Subclasses set ``descriptor`` (name plus a weights hash where applicable)
    and implement ``features_torch``; extractors without a differentiable
    path may override ``extract`` directly instead.
    """

    descriptor: str = "base"

    def features_torch(self, images: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def extract(self, images: torch.Tensor | np.ndarray) -> np.ndarray:
        if isinstance(images, np.ndarray):
            images = torch.from_numpy(images)
        with torch.no_grad():
            feats = self.features_torch(images.float())
        return feats.double().numpy()


class PixelFeatures(FeatureExtractor):
    """Area-downsampled pixels, flattened.  No weights, trivially deterministic."""

    def __init__(self, out_size: int = 8):
        self.out_size = out_size
        self.descriptor = f"pixels{out_size}"

    def features_torch(self, images: torch.Tensor) -> torch.Tensor:
        pooled = torch.nn.functional.adaptive_avg_pool2d(images, self.out_size)
        return pooled.flatten(1)


class ConvFeatures(FeatureExtractor):
    """Random-init convolutional features, pooled per stage and concatenated.

    The weights come from a seeded generator and never train; the descriptor
    embeds a hash of them so reports pin the exact feature space.
    """

    def __init__(self, in_channels: int = 1, width: int = 16, depth: int = 3, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        layers = []
        c = in_channels
        for i in range(depth):
            out = width * 2**i
            conv = nn.Conv2d(c, out, kernel_size=3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * 0.3)
                conv.bias.zero_()
            layers.append(conv)
            c = out
        self.stages = nn.ModuleList(layers).eval()
        for p in self.stages.parameters():
            p.requires_grad_(False)
        digest = hashlib.sha256()
        for p in self.stages.parameters():
            digest.update(p.numpy().tobytes())
        self.descriptor = f"conv{width}x{depth}-s{seed}-{digest.hexdigest()[:8]}"

    def features_torch(self, images: torch.Tensor) -> torch.Tensor:
        feats = []
        h = images
        for stage in self.stages:
            h = torch.tanh(stage(h))
            feats.append(h.mean(dim=(2, 3)))
        return torch.cat(feats, dim=1)


def save_features(path, features: np.ndarray) -> None:
    """Cache an (N, D) float matrix: magic, D, N, dtype tag, row-major values."""
    feats = np.ascontiguousarray(features)
    if feats.ndim != 2:
        raise ContractError(f"feature matrix must be 2-d, got shape {feats.shape}")
    dtype = np.dtype(feats.dtype).newbyteorder("<")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<QQ", feats.shape[1], feats.shape[0]))
        tag = dtype.str.encode()
        fh.write(struct.pack("<B", len(tag)))
        fh.write(tag)
        fh.write(feats.astype(dtype).tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(len(FEATURE_MAGIC))
        if magic != FEATURE_MAGIC:
            raise ContractError(f"{path}: not a feature cache (bad magic {magic!r})")
        d, n = struct.unpack("<QQ", fh.read(16))
        (taglen,) = struct.unpack("<B", fh.read(1))
        dtype = np.dtype(fh.read(taglen).decode())
        data = np.frombuffer(fh.read(), dtype=dtype)
    if data.size != n * d:
        raise ContractError(f"{path}: truncated feature cache")
    return data.reshape(n, d).astype(dtype.newbyteorder("="))


# ---------------------------------------------------------------------------
# Gaussian fit and Fréchet distance


@dataclass(frozen=True)
class GaussianStats:
    """Feature-space sample mean and unbiased covariance."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        if self.sigma.shape != (self.mu.size, self.mu.size):
            raise ContractError(
                f"sigma shape {self.sigma.shape} does not match mu of size {self.mu.size}"
            )


def fit_gaussian(features: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased (divisor N-1) covariance, symmetrized."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ContractError(f"need an (N>=2, D) feature matrix, got shape {feats.shape}")
    mu = feats.mean(axis=0)
    centered = feats - mu
    sigma = centered.T @ centered / (feats.shape[0] - 1)
    sigma = (sigma + sigma.T) / 2.0
    return GaussianStats(mu=mu, sigma=sigma)


def matrix_sqrt(sigma: np.ndarray, neg_tol: float = 1e-8) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition.

    Eigenvalues below ``-neg_tol * ||sigma||_2`` mean the input is genuinely
    indefinite and are rejected; small negative values from round-off are
    clamped to zero.
    """
    sig = np.asarray(sigma, dtype=np.float64)
    if sig.ndim != 2 or sig.shape[0] != sig.shape[1]:
        raise ContractError(f"expected a square matrix, got shape {sig.shape}")
    scale = np.abs(sig).max()
    if scale > 0 and np.abs(sig - sig.T).max() > 1e-8 * scale:
        raise NumericError("matrix is not symmetric within tolerance")
    w, v = np.linalg.eigh((sig + sig.T) / 2.0)
    bound = np.abs(w).max() if w.size else 0.0
    if w.min() < -neg_tol * bound:
        raise NumericError(f"matrix is indefinite: min eigenvalue {w.min():.3e}")
    w = np.clip(w, 0.0, None)
    return (v * np.sqrt(w)) @ v.T


def _cross_trace(sigma1: np.ndarray, sigma2: np.ndarray) -> float:
    s1 = matrix_sqrt(sigma1)
    inner = s1 @ sigma2 @ s1
    return float(np.trace(matrix_sqrt((inner + inner.T) / 2.0)))


def frechet_distance(g1: GaussianStats, g2: GaussianStats) -> float:
    """Squared Fréchet distance ||mu1-mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}).

    The cross trace is evaluated through the symmetrized product in both
    orders and averaged, which makes the result exactly symmetric in its
    arguments; tiny negative residue is clamped to zero.
    """
    if g1.mu.size != g2.mu.size:
        raise ContractError(f"feature dims differ: {g1.mu.size} vs {g2.mu.size}")
    diff = g1.mu - g2.mu
    cross = 0.5 * (_cross_trace(g1.sigma, g2.sigma) + _cross_trace(g2.sigma, g1.sigma))
    d2 = float(diff @ diff + np.trace(g1.sigma) + np.trace(g2.sigma) - 2.0 * cross)
    return max(d2, 0.0)


def _as_features(data, extractor: FeatureExtractor | None) -> np.ndarray:
    if isinstance(data, np.ndarray) and data.ndim == 2:
        return np.asarray(data, dtype=np.float64)
    if extractor is None:
        raise ContractError("image input requires a feature extractor")
    return extractor.extract(data)


def fid(real, gen, extractor: FeatureExtractor | None = None) -> float:
    """Fréchet distance between Gaussians fitted to real and generated features.

    ``real`` and ``gen`` may be NCHW image batches (routed through the
    extractor) or precomputed (N, D) feature matrices.  Invariant to item
    order within each set.
    """
    return frechet_distance(
        fit_gaussian(_as_features(real, extractor)),
        fit_gaussian(_as_features(gen, extractor)),
    )


# ---------------------------------------------------------------------------
# improved precision / recall


@dataclass(frozen=True)
class PRConfig:
    """k-NN manifold estimation settings (Euclidean feature distance)."""

    k: int = 3

    def __post_init__(self):
        if self.k < 1:
            raise ContractError(f"k must be >= 1, got {self.k}")


def _pairwise_distances(x: np.ndarray, y: np.ndarray, block: int = 64) -> np.ndarray:
    """Euclidean distances, computed blockwise by direct differencing."""
    out = np.empty((x.shape[0], y.shape[0]), dtype=np.float64)
    for start in range(0, x.shape[0], block):
        stop = min(start + block, x.shape[0])
        diff = x[start:stop, None, :] - y[None, :, :]
        out[start:stop] = np.sqrt((diff * diff).sum(axis=-1))
    return out


def knn_radii(points: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest neighbor, excluding itself."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ContractError(f"need an (N, D) point matrix, got shape {pts.shape}")
    if not 1 <= k < pts.shape[0]:
        raise ContractError(f"k={k} requires 1 <= k < N={pts.shape[0]}")
    dists = _pairwise_distances(pts, pts)
    np.fill_diagonal(dists, np.inf)
    return np.partition(dists, k - 1, axis=1)[:, k - 1]


def improved_precision_recall(
    real_features: np.ndarray,
    gen_features: np.ndarray,
    cfg: PRConfig = PRConfig(),
) -> tuple[float, float]:
    """Fidelity and diversity via k-NN manifold overlap.

    Precision: fraction of generated points lying within the k-NN ball of at
    least one real point.  Recall: fraction of real points lying within the
    k-NN ball of at least one generated point.
    """
    real = np.asarray(real_features, dtype=np.float64)
    gen = np.asarray(gen_features, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ContractError(
            f"need (N, D) and (M, D) matrices, got {real.shape} and {gen.shape}"
        )
    if cfg.k >= min(real.shape[0], gen.shape[0]):
        raise ContractError(
            f"k={cfg.k} requires k < min(N={real.shape[0]}, M={gen.shape[0]})"
        )
    real_radii = knn_radii(real, cfg.k)
    gen_radii = knn_radii(gen, cfg.k)
    cross = _pairwise_distances(real, gen)  # (N, M)
    precision = float((cross <= real_radii[:, None]).any(axis=0).mean())
    recall = float((cross <= gen_radii[None, :]).any(axis=1).mean())
    return precision, recall


# ---------------------------------------------------------------------------
# pixel-space metrics and reports


def mse(a, b) -> float:
    """Plain mean squared error over all elements.

    Callers comparing images should rescale them to [0, 1] first; reports
    quote the result in 1e-5 units.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ContractError(f"shapes differ: {x.shape} vs {y.shape}")
    return float(((x - y) ** 2).mean())


@dataclass
class MetricReport:
    """One evaluation run: scores plus everything needed to reproduce them."""

    fid: float
    precision: float
    recall: float
    ms_ssim: float | None = None
    mse: float | None = None
    reference: str = ""
    extractor: str = ""
    seed: int | None = None
    created_at: float = field(default_factory=time.time)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.precision <= 1.0 or not 0.0 <= self.recall <= 1.0:
            raise ContractError(
                f"precision/recall out of [0,1]: {self.precision}, {self.recall}"
            )
        if self.fid < 0.0:
            raise ContractError(f"fid must be >= 0, got {self.fid}")

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @staticmethod
    def csv_header() -> str:
        return "fid,precision,recall,ms_ssim,mse,reference,extractor,seed"

    def to_csv_row(self) -> str:
        opt = lambda v: "" if v is None else f"{v}"
        return ",".join(
            [
                f"{self.fid:.6f}",
                f"{self.precision:.6f}",
                f"{self.recall:.6f}",
                opt(self.ms_ssim),
                opt(self.mse),
                self.reference,
                self.extractor,
                opt(self.seed),
            ]
        )

    @staticmethod
    def from_json(text: str) -> "MetricReport":
        return MetricReport(**json.loads(text))
