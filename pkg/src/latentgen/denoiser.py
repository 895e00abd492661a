"""Phase-2 model: class- and time-conditional UNet predicting injected noise.

The network maps a noised latent (N, c, h, w) plus a step index and a class
label to a same-shaped noise estimate.  Step and label each embed into a
shared vector (sinusoid + learned linear for the step, a learned table for
the label), are combined by addition, and enter every residual block.

GroupNorm with 8 groups, 3x3 convolutions, and Swish activations, as in the
autoencoder.  The output convolution is initialized near zero so an
untrained model predicts almost-zero noise, putting the initial epsilon-MSE
at ~1.0 for unit-normal targets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractError

KERNEL = 3


@dataclass(frozen=True)
class UNetConfig:
    latent_channels: int = 8
    widths: tuple[int, ...] = (64, 128)
    embed_dim: int = 128
    num_classes: int = 2
    norm_groups: int = 8
    attention: bool = False  # self-attention at the lowest resolution only

    def __post_init__(self):
        if self.embed_dim % 2 != 0:
            raise ConfigurationError(f"embed_dim must be even, got {self.embed_dim}")
        if len(self.widths) < 1:
            raise ConfigurationError("need at least one level")
        for w in self.widths:
            if w % self.norm_groups != 0:
                raise ConfigurationError(
                    f"width {w} not divisible by norm_groups {self.norm_groups}"
                )
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")

    @property
    def levels(self) -> int:
        return len(self.widths)


def sinusoidal_time_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Interleaved sin/cos position code: out[2i] = sin(t*f_i), out[2i+1] = cos(t*f_i).

    Frequencies follow f_i = 10000^(-2i/dim), so t = 0 encodes as the
    alternating pattern (0, 1, 0, 1, ...).
    """
    if dim % 2 != 0:
        raise ConfigurationError(f"embedding dim must be even, got {dim}")
    t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    i = torch.arange(dim // 2, dtype=torch.float64)
    freqs = torch.exp(-math.log(10000.0) * 2.0 * i / dim)
    args = t[:, None] * freqs[None, :]
    out = torch.empty(t.shape[0], dim, dtype=torch.float64)
    out[:, 0::2] = torch.sin(args)
    out[:, 1::2] = torch.cos(args)
    return out.float()


class ConditionEmbedding(nn.Module):
    """Joint step/label embedding: linear map over the sinusoid plus a label table."""

    def __init__(self, embed_dim: int, num_classes: int):
        super().__init__()
        self.embed_dim = embed_dim
        self.time_mlp = nn.Sequential(
            nn.Linear(embed_dim, embed_dim), nn.SiLU(), nn.Linear(embed_dim, embed_dim)
        )
        self.label_table = nn.Embedding(num_classes, embed_dim)

    def time_embedding(self, t: torch.Tensor) -> torch.Tensor:
        return self.time_mlp(sinusoidal_time_embedding(t, self.embed_dim).to(
            self.time_mlp[0].weight.dtype))

    def forward(self, t: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
        return self.time_embedding(t) + self.label_table(label)


class CondResBlock(nn.Module):
    """Residual block with the condition vector added per-channel after conv1."""

    def __init__(self, in_ch: int, out_ch: int, embed_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, KERNEL, padding=1)
        self.emb_proj = nn.Linear(embed_dim, out_ch)
        self.norm2 = nn.GroupNorm(groups, out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, KERNEL, padding=1)
        self.shortcut = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.shortcut(x) + h


class SelfAttention(nn.Module):
    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        n, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(n, 3, c, h * w).unbind(1)
        attn = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(c), dim=-1)
        out = (v @ attn.transpose(1, 2)).reshape(n, c, h, w)
        return x + self.proj(out)


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = config.widths
        g = config.norm_groups
        emb = config.embed_dim
        self.cond = ConditionEmbedding(emb, config.num_classes)
        self.conv_in = nn.Conv2d(config.latent_channels, widths[0], KERNEL, padding=1)

        self.down_blocks = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        for i, w in enumerate(widths):
            prev = widths[0] if i == 0 else widths[i - 1]
            self.down_blocks.append(nn.ModuleList([
                CondResBlock(prev, w, emb, g), CondResBlock(w, w, emb, g)
            ]))
            self.downsamples.append(
                nn.Conv2d(w, w, KERNEL, stride=2, padding=1) if i < len(widths) - 1
                else nn.Identity()
            )

        mid = widths[-1]
        self.mid_block1 = CondResBlock(mid, mid, emb, g)
        self.mid_attn = SelfAttention(mid, g) if config.attention else None
        self.mid_block2 = CondResBlock(mid, mid, emb, g)

        self.up_blocks = nn.ModuleList()
        self.upsamples = nn.ModuleList()
        for i in reversed(range(len(widths))):
            w = widths[i]
            below = widths[i + 1] if i < len(widths) - 1 else widths[-1]
            self.upsamples.append(
                nn.Conv2d(below, w, KERNEL, padding=1) if i < len(widths) - 1
                else nn.Identity()
            )
            self.up_blocks.append(nn.ModuleList([
                CondResBlock(2 * w, w, emb, g), CondResBlock(w, w, emb, g)
            ]))

        self.out_norm = nn.GroupNorm(g, widths[0])
        self.conv_out = nn.Conv2d(widths[0], config.latent_channels, KERNEL, padding=1)
        with torch.no_grad():
            self.conv_out.weight.mul_(1e-2)
            self.conv_out.bias.zero_()

    def _check_inputs(self, z_t: torch.Tensor, label: torch.Tensor) -> None:
        cfg = self.config
        if z_t.dim() != 4 or z_t.shape[1] != cfg.latent_channels:
            raise ContractError(
                f"expected (N, {cfg.latent_channels}, h, w) latent, got {tuple(z_t.shape)}"
            )
        div = 2 ** (cfg.levels - 1)
        if z_t.shape[-2] % div or z_t.shape[-1] % div:
            raise ContractError(
                f"latent dims {tuple(z_t.shape[-2:])} must be divisible by {div}"
            )
        if label.min() < 0 or label.max() >= cfg.num_classes:
            raise ContractError(
                f"label out of range [0, {cfg.num_classes}): {label.tolist()}"
            )

    def forward(self, z_t: torch.Tensor, t, label) -> torch.Tensor:
        """Predict the injected noise; output shape always equals input shape."""
        n = z_t.shape[0]
        t = torch.as_tensor(t).reshape(-1)
        label = torch.as_tensor(label, dtype=torch.int64).reshape(-1)
        if t.numel() == 1:
            t = t.expand(n)
        if label.numel() == 1:
            label = label.expand(n)
        self._check_inputs(z_t, label)
        emb = self.cond(t, label)

        h = self.conv_in(z_t)
        stack = []
        for blocks, down in zip(self.down_blocks, self.downsamples):
            for block in blocks:
                h = block(h, emb)
            stack.append(h)
            h = down(h)

        h = self.mid_block1(h, emb)
        if self.mid_attn is not None:
            h = self.mid_attn(h)
        h = self.mid_block2(h, emb)

        for up, blocks in zip(self.upsamples, self.up_blocks):
            if not isinstance(up, nn.Identity):
                h = F.interpolate(h, scale_factor=2, mode="nearest")
            h = up(h)
            h = torch.cat([h, stack.pop()], dim=1)
            for block in blocks:
                h = block(h, emb)

        return self.conv_out(F.silu(self.out_norm(h)))


def diffusion_loss(eps_hat: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted and true noise."""
    if eps_hat.shape != eps.shape:
        raise ContractError(
            f"shapes differ: {tuple(eps_hat.shape)} vs {tuple(eps.shape)}"
        )
    return ((eps_hat - eps) ** 2).mean()
