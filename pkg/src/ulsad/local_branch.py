"""Feature reconstruction network (shared, dual-head) and the patch distances."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import torch
from torch import nn

from .errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)

COSINE_EPS = 1e-8


@dataclass
class LossConfig:
    lambda_l: float = 0.5
    lambda_g: float = 0.5
    epsilon_norm: float = COSINE_EPS

    def __post_init__(self):
        if self.lambda_l < 0 or self.lambda_g < 0:
            raise ConfigError("lambda_l and lambda_g must be non-negative")
        if self.epsilon_norm <= 0:
            raise ConfigError("epsilon_norm must be positive")


@dataclass
class FRNConfig:
    """Layer widths default to the ratios of the reference network (c* = 384).

    ``encoder_channels`` and ``decoder_channels`` left as ``None`` resolve to
    (2c*, 4c*, 4c*) and (2c*, c*); the last decoder layer always emits 2c*.
    """

    in_channels: int = 384
    encoder_channels: Optional[Tuple[int, int, int]] = None
    decoder_channels: Optional[Tuple[int, int]] = None
    activation: str = "leaky_relu"
    negative_slope: float = 0.01

    def __post_init__(self):
        c = self.in_channels
        if self.encoder_channels is None:
            self.encoder_channels = (2 * c, 4 * c, 4 * c)
        if self.decoder_channels is None:
            self.decoder_channels = (2 * c, c)
        self.encoder_channels = tuple(int(v) for v in self.encoder_channels)
        self.decoder_channels = tuple(int(v) for v in self.decoder_channels)
        if len(self.encoder_channels) != 3 or len(self.decoder_channels) != 2:
            raise ConfigError("FRN needs three encoder widths and two decoder widths")
        if self.activation not in ("leaky_relu", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")


def make_activation(name: str, negative_slope: float = 0.01) -> nn.Module:
    if name == "relu":
        return nn.ReLU(inplace=True)
    return nn.LeakyReLU(negative_slope, inplace=True)


class ReconstructedFeatures(NamedTuple):
    u_prime: torch.Tensor  # structural head
    u_double_prime: torch.Tensor  # local-global coupling head


class FeatureReconstructionNetwork(nn.Module):
    """Encoder: two stride-2 3x3 convs and one stride-1 3x3 conv.
    Decoder: two stride-2 4x4 transposed convs and a 5x5 output layer
    emitting 2c* channels at the input resolution.
    """

    def __init__(self, cfg: FRNConfig):
        super().__init__()
        self.cfg = cfg
        c = cfg.in_channels
        e1, e2, e3 = cfg.encoder_channels
        d1, d2 = cfg.decoder_channels
        act = lambda: make_activation(cfg.activation, cfg.negative_slope)  # noqa: E731
        self.encoder = nn.Sequential(
            nn.Conv2d(c, e1, 3, stride=2, padding=1), act(), nn.BatchNorm2d(e1),
            nn.Conv2d(e1, e2, 3, stride=2, padding=1), act(), nn.BatchNorm2d(e2),
            nn.Conv2d(e2, e3, 3, stride=1, padding=1), act(), nn.BatchNorm2d(e3),
        )
        self.decoder = nn.Sequential(
            nn.ConvTranspose2d(e3, d1, 4, stride=2, padding=1), nn.ReLU(inplace=True), nn.BatchNorm2d(d1),
            nn.ConvTranspose2d(d1, d2, 4, stride=2, padding=1), nn.ReLU(inplace=True), nn.BatchNorm2d(d2),
            # padding 2 keeps the spatial size; the output layer is linear
            nn.ConvTranspose2d(d2, 2 * c, 5, stride=1, padding=2),
        )

    def forward(self, u: torch.Tensor) -> ReconstructedFeatures:
        if u.ndim != 4 or u.shape[1] != self.cfg.in_channels:
            raise ShapeError(f"FRN expects (B, {self.cfg.in_channels}, h, w), got {tuple(u.shape)}")
        h, w = u.shape[-2:]
        if h % 4 or w % 4:
            raise ShapeError(f"feature map side must be divisible by 4, got {h}x{w}")
        out = self.decoder(self.encoder(u))
        c = self.cfg.in_channels
        return ReconstructedFeatures(out[:, :c], out[:, c:])


def frn_forward(u: torch.Tensor, frn: FeatureReconstructionNetwork) -> ReconstructedFeatures:
    return frn(u)


def _check_pair(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def distance_v(a: torch.Tensor, b: torch.Tensor, dim: int = 0) -> torch.Tensor:
    """Squared euclidean distance along ``dim``."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    _check_pair(a, b)
    return ((a - b) ** 2).sum(dim=dim)


def distance_d(a: torch.Tensor, b: torch.Tensor, dim: int = 0, eps: float = COSINE_EPS) -> torch.Tensor:
    """One minus cosine similarity along ``dim``; norms are floored at ``eps``."""
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    _check_pair(a, b)
    na = a.norm(dim=dim)
    nb = b.norm(dim=dim)
    if (na < eps).any() or (nb < eps).any():
        logger.debug("zero-norm vector in cosine distance; norm floored at %g", eps)
    dot = (a * b).sum(dim=dim)
    cos = dot / (na.clamp_min(eps) * nb.clamp_min(eps))
    return 1.0 - cos.clamp(-1.0, 1.0)  # rounding can push |cos| past 1


def column_distance(x: torch.Tensor, y: torch.Tensor, lam: float, eps: float = COSINE_EPS, dim: int = -2):
    """l_v + lam * l_d for every vector along ``dim`` (channel axis)."""
    out = distance_v(x, y, dim=dim)
    if lam:
        out = out + lam * distance_d(x, y, dim=dim, eps=eps)
    return out


def _patch_loss(x, y, lam, eps):
    # patch matrices are (..., c, k); average over columns and any batch axes
    _check_pair(x, y)
    if x.ndim < 2:
        raise ShapeError("patch matrices need (c, k) dimensions")
    return column_distance(x, y, lam, eps, dim=-2).mean()


def loss_pl(z_tilde_prime: torch.Tensor, z: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Patch reconstruction loss between the structural head and the target features."""
    return _patch_loss(z_tilde_prime, z, cfg.lambda_l, cfg.epsilon_norm)
