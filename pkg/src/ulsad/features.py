"""Frozen backbone, feature aggregator and the patch-matrix reshaping helpers."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np
import torch
import torch.nn.functional as F
import torchvision
from torch import nn

from .errors import CalibrationError, ConfigError, NumericError, ShapeError

logger = logging.getLogger(__name__)

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)
SIGMA_FLOOR = 1e-6

# channel counts of layer1..layer4 per architecture
_LAYER_CHANNELS = {
    "resnet18": (64, 128, 256, 512),
    "resnet50": (256, 512, 1024, 2048),
    "resnet152": (256, 512, 1024, 2048),
    "wide_resnet50_2": (256, 512, 1024, 2048),
    "wide_resnet101_2": (256, 512, 1024, 2048),
}
# total stride of layer1..layer4 outputs
_LAYER_STRIDE = (4, 8, 16, 32)


@dataclass
class BackboneConfig:
    arch: str = "wide_resnet50_2"
    layers: Tuple[int, int] = (2, 3)
    width: int = 384
    image_size: int = 256
    weights: str = "imagenet"  # "imagenet", "random" or a path to a state dict
    seed: int = 0
    upsample: str = "bilinear"

    def __post_init__(self):
        self.layers = tuple(int(v) for v in self.layers)
        if self.arch not in _LAYER_CHANNELS:
            raise ConfigError(f"unsupported backbone {self.arch!r}; choose from {sorted(_LAYER_CHANNELS)}")
        j, j1 = self.layers
        if not (1 <= j < j1 <= 4):
            raise ConfigError(f"tap layers must satisfy 1 <= j < j+1 <= 4, got {self.layers}")
        if self.upsample not in ("bilinear", "nearest"):
            raise ConfigError(f"upsample must be 'bilinear' or 'nearest', got {self.upsample!r}")
        if self.width < 1:
            raise ConfigError("projection width must be positive")
        if self.image_size % _LAYER_STRIDE[j1 - 1]:
            raise ConfigError(f"image_size {self.image_size} is not divisible by the stride of layer{j1}")

    @property
    def concat_channels(self) -> int:
        ch = _LAYER_CHANNELS[self.arch]
        return ch[self.layers[0] - 1] + ch[self.layers[1] - 1]

    @property
    def feature_size(self) -> int:
        """Spatial side h* = w* of the aggregated map."""
        return self.image_size // _LAYER_STRIDE[self.layers[0] - 1]


@dataclass
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ShapeError("mu and sigma must be vectors of equal length")
        if not np.all(self.sigma > 0):
            raise CalibrationError("channel sigma must be strictly positive")

    @classmethod
    def identity(cls, channels: int) -> "ChannelStats":
        return cls(np.zeros(channels), np.ones(channels))


class ChannelMoments:
    """Pooled per-channel mean/variance accumulator (Chan et al. merge).

    Feed batches of feature maps shaped (B, C, H, W); every spatial position
    of every image counts as one sample.
    """

    def __init__(self):
        self.count = 0
        self.mean = None
        self.m2 = None

    def update(self, feats: torch.Tensor) -> None:
        x = torch.as_tensor(feats).detach().to(torch.float64)
        x = x.transpose(0, 1).reshape(x.shape[1], -1)
        n = x.shape[1]
        if n == 0:
            return
        mean = x.mean(dim=1)
        m2 = ((x - mean[:, None]) ** 2).sum(dim=1)
        if self.mean is None:
            self.count, self.mean, self.m2 = n, mean, m2
            return
        total = self.count + n
        delta = mean - self.mean
        self.mean = self.mean + delta * (n / total)
        self.m2 = self.m2 + m2 + delta ** 2 * (self.count * n / total)
        self.count = total

    def finalize(self, eps: float = SIGMA_FLOOR) -> ChannelStats:
        if self.count == 0:
            raise CalibrationError("no samples accumulated")
        var = (self.m2 / self.count).clamp_min(0.0)
        sigma = np.maximum(var.sqrt().numpy(), eps)
        return ChannelStats(self.mean.numpy(), sigma)


def check_image(x: torch.Tensor, size: int | None = None) -> torch.Tensor:
    """Validate an image batch (B, 3, H, W) or single image (3, H, W)."""
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x), dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected image tensor of shape (B, 3, H, W), got {tuple(x.shape)}")
    if size is not None and (x.shape[2] != size or x.shape[3] != size):
        raise ShapeError(f"expected {size}x{size} images, got {x.shape[2]}x{x.shape[3]}")
    if not torch.isfinite(x).all():
        raise NumericError("image contains non-finite values")
    return x


def _build_torchvision(cfg: BackboneConfig) -> nn.Module:
    ctor = getattr(torchvision.models, cfg.arch)
    if cfg.weights == "imagenet":
        try:
            return ctor(weights="DEFAULT")
        except Exception as exc:  # offline, corrupt cache, ...
            raise ConfigError(
                f"could not load pre-trained weights for {cfg.arch} ({exc}); "
                "pass weights='random' or a local state-dict path"
            ) from exc
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed)
        model = ctor(weights=None)
    if cfg.weights != "random":
        try:
            state = torch.load(cfg.weights, map_location="cpu", weights_only=True)
            model.load_state_dict(state)
        except Exception as exc:
            raise ConfigError(f"could not load backbone weights from {cfg.weights}: {exc}") from exc
    return model


class FeatureExtractor(nn.Module):
    """Frozen ResNet-family network returning the two tapped layers."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        net = _build_torchvision(cfg)
        last = cfg.layers[1]
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.blocks = nn.ModuleList([getattr(net, f"layer{i}") for i in range(1, last + 1)])
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)

    def train(self, mode: bool = True):
        # always frozen: BN running stats must never move
        return super().train(False)

    def preprocess(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / self.std

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        x = check_image(x, self.cfg.image_size)
        h = self.stem(self.preprocess(x))
        taps = {}
        for i, block in enumerate(self.blocks, start=1):
            h = block(h)
            taps[i] = h
        j, j1 = self.cfg.layers
        return taps[j], taps[j1]


def extract_features(images: torch.Tensor, extractor: FeatureExtractor):
    if extractor is None:
        raise ConfigError("backbone is not initialised")
    return extractor(images)


def projection_matrix(in_channels: int, out_channels: int, seed: int = 0) -> torch.Tensor:
    """Fixed (out, in) projection: identity when widths agree, else orthonormal rows."""
    if out_channels == in_channels:
        return torch.eye(in_channels)
    if out_channels > in_channels:
        raise ConfigError(f"projection width {out_channels} exceeds concatenated width {in_channels}")
    gen = torch.Generator().manual_seed(seed + 7919)
    g = torch.randn(in_channels, out_channels, generator=gen, dtype=torch.float64)
    q, r = torch.linalg.qr(g)
    q = q * torch.sign(torch.diagonal(r))  # unique QR
    return q.T.contiguous().to(torch.float32)


class FeatureAggregator(nn.Module):
    """Upsample the deeper tap, concatenate, and project to ``width`` channels.

    The projection is a 1x1 convolution whose weights are fixed at
    construction; it belongs to the frozen feature side so that the
    reconstruction targets do not move during training.
    """

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.mode = cfg.upsample
        self.register_buffer("projection", projection_matrix(cfg.concat_channels, cfg.width, cfg.seed))

    def forward(self, raw_j: torch.Tensor, raw_j1: torch.Tensor) -> torch.Tensor:
        return aggregate(raw_j, raw_j1, self.projection, self.mode)


def aggregate(raw_j, raw_j1, projection=None, mode="bilinear"):
    hj, wj = raw_j.shape[-2:]
    h1, w1 = raw_j1.shape[-2:]
    if hj % h1 or wj % w1:
        raise ShapeError(f"deeper tap {h1}x{w1} does not divide shallower tap {hj}x{wj}")
    if (h1, w1) != (hj, wj):
        kw = {"align_corners": False} if mode == "bilinear" else {}
        raw_j1 = F.interpolate(raw_j1, size=(hj, wj), mode=mode, **kw)
    u = torch.cat([raw_j, raw_j1], dim=1)
    if projection is None:
        return u
    if projection.shape[1] != u.shape[1]:
        raise ShapeError(f"projection expects {projection.shape[1]} channels, got {u.shape[1]}")
    return torch.einsum("oc,bchw->bohw", projection.to(u.dtype), u)


def normalize_features(u: torch.Tensor, stats: ChannelStats) -> torch.Tensor:
    if np.any(stats.sigma <= 0):
        raise CalibrationError("sigma contains non-positive entries")
    c = u.shape[-3]
    if stats.mu.shape[0] != c:
        raise ShapeError(f"stats have {stats.mu.shape[0]} channels, feature map has {c}")
    mu = torch.as_tensor(stats.mu, dtype=u.dtype).view(c, 1, 1)
    sigma = torch.as_tensor(stats.sigma, dtype=u.dtype).view(c, 1, 1)
    return (u - mu) / sigma


def flatten(u):
    """(..., c, h, w) -> (..., c, h*w); column k = h*w_size + w (0-based)."""
    if u.ndim < 3:
        raise ShapeError("feature map needs at least (c, h, w) dimensions")
    return u.reshape(*u.shape[:-2], u.shape[-2] * u.shape[-1])


def unflatten(z, h: int, w: int):
    if z.shape[-1] != h * w:
        raise ShapeError(f"k*={z.shape[-1]} does not equal {h}*{w}")
    return z.reshape(*z.shape[:-1], h, w)


class FeaturePipeline(nn.Module):
    """Backbone + aggregator; produces un-normalised U for image batches."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.extractor = FeatureExtractor(cfg)
        self.aggregator = FeatureAggregator(cfg)

    def train(self, mode: bool = True):
        return super().train(False)

    @torch.no_grad()
    def forward(self, x: torch.Tensor) -> torch.Tensor:
        raw_j, raw_j1 = self.extractor(x)
        return self.aggregator(raw_j, raw_j1)


def iter_batches(images: Iterable[torch.Tensor], batch_size: int):
    buf = []
    for img in images:
        buf.append(img)
        if len(buf) == batch_size:
            yield torch.stack(buf)
            buf = []
    if buf:
        yield torch.stack(buf)
