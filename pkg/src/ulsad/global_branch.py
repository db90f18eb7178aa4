"""Global autoencoder, self/cross attention over patch features, and the global losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError
from .local_branch import LossConfig, _check_pair, _patch_loss, make_activation


@dataclass
class GlobalAEConfig:
    image_size: int = 256
    out_channels: int = 384
    out_size: int = 32
    encoder_channels: Tuple[int, ...] = (32, 32, 64, 64, 64, 64)
    decoder_channels: int = 64
    activation: str = "leaky_relu"
    negative_slope: float = 0.01

    def __post_init__(self):
        self.encoder_channels = tuple(int(v) for v in self.encoder_channels)
        if len(self.encoder_channels) != 6:
            raise ConfigError("global encoder needs six widths (five stride-2 convs + bottleneck)")
        if self.image_size % 32:
            raise ConfigError("global autoencoder input size must be divisible by 32")
        if self.out_size < 8 or self.out_size % 8:
            raise ConfigError("global autoencoder output size must be a multiple of 8")

    @property
    def ladder(self) -> Tuple[int, ...]:
        """Interpolation targets of the decoder, ending at the output size."""
        h = self.out_size
        return (h // 8, h // 4, h // 2, h, 2 * h, h)


class GlobalAutoencoder(nn.Module):
    """Image -> 1x1 bottleneck -> feature-space map of shape (c*, h*, w*)."""

    def __init__(self, cfg: GlobalAEConfig):
        super().__init__()
        self.cfg = cfg
        act = lambda: make_activation(cfg.activation, cfg.negative_slope)  # noqa: E731
        ch = cfg.encoder_channels
        layers = []
        prev = 3
        for width in ch[:5]:
            layers += [nn.Conv2d(prev, width, 4, stride=2, padding=1), act(), nn.BatchNorm2d(width)]
            prev = width
        # bottleneck kernel spans the remaining spatial extent
        k = cfg.image_size // 32
        layers += [nn.Conv2d(prev, ch[5], k, stride=1, padding=0), act(), nn.BatchNorm2d(ch[5])]
        self.encoder = nn.Sequential(*layers)

        d = cfg.decoder_channels
        self.up_convs = nn.ModuleList()
        prev = ch[5]
        for _ in range(5):
            self.up_convs.append(nn.Sequential(nn.Conv2d(prev, d, 4, stride=1, padding=2), nn.ReLU(inplace=True), nn.BatchNorm2d(d)))
            prev = d
        self.head = nn.Sequential(
            nn.Conv2d(d, d, 3, stride=1, padding=1), nn.ReLU(inplace=True), nn.BatchNorm2d(d),
            nn.Conv2d(d, cfg.out_channels, 3, stride=1, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s = self.cfg.image_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"global autoencoder expects (B, 3, {s}, {s}), got {tuple(x.shape)}")
        h = self.encoder(x)
        ladder = self.cfg.ladder
        for size, conv in zip(ladder[:5], self.up_convs):
            h = conv(F.interpolate(h, size=(size, size), mode="bilinear", align_corners=False))
        h = F.interpolate(h, size=(ladder[5], ladder[5]), mode="bilinear", align_corners=False)
        return self.head(h)


def gae_forward(x: torch.Tensor, gae: GlobalAutoencoder) -> torch.Tensor:
    return gae(x)


class Attention(NamedTuple):
    weights: torch.Tensor  # (..., k, k), columns sum to one
    attended: torch.Tensor  # (..., c, k)


def cross_attention(z: torch.Tensor, z_hat: torch.Tensor) -> Attention:
    """Queries from ``z_hat``, keys and values from ``z``.

    weights[p, q] is the softmax over p of <z_p, z_hat_q> / sqrt(c);
    attended = z @ weights, so each column is a convex combination of z's columns.
    """
    _check_pair(z, z_hat)
    if z.ndim < 2:
        raise ShapeError("patch matrices need (c, k) dimensions")
    c = z.shape[-2]
    logits = z.transpose(-1, -2) @ z_hat / math.sqrt(c)
    weights = torch.softmax(logits, dim=-2)  # max-subtracted internally
    return Attention(weights, z @ weights)


def self_attention(z: torch.Tensor) -> Attention:
    return cross_attention(z, z)


def loss_pg(a_hat: torch.Tensor, a: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Consistency between the cross-attention map and the self-attention map."""
    return _patch_loss(a_hat, a, cfg.lambda_g, cfg.epsilon_norm)


def loss_pg_direct(z_hat: torch.Tensor, z: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return _patch_loss(z_hat, z, cfg.lambda_g, cfg.epsilon_norm)


def loss_lg(z_tilde_double_prime: torch.Tensor, z_hat: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Couples the second FRN head with the autoencoder output; both sides carry gradient."""
    return _patch_loss(z_tilde_double_prime, z_hat, cfg.lambda_g, cfg.epsilon_norm)


def consistency_loss(z: torch.Tensor, z_hat: torch.Tensor, cfg: LossConfig, mode: str = "attention") -> torch.Tensor:
    """Global-branch loss with ``z`` treated as a constant target."""
    z = z.detach()
    if mode == "direct":
        return loss_pg_direct(z_hat, z, cfg)
    if mode != "attention":
        raise ConfigError(f"global_loss must be 'attention' or 'direct', got {mode!r}")
    with torch.no_grad():
        a = self_attention(z).attended
    a_hat = cross_attention(z, z_hat).attended
    return loss_pg(a_hat, a, cfg)
