"""Training loop, the trained-model bundle, and checkpoint persistence."""
from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, DataError, NumericError, PersistenceError
from .features import BackboneConfig, ChannelMoments, ChannelStats, FeaturePipeline, flatten, normalize_features
from .global_branch import GlobalAEConfig, GlobalAutoencoder, consistency_loss, loss_lg
from .inference import QuantileCalibration
from .local_branch import FeatureReconstructionNetwork, FRNConfig, LossConfig, loss_pl

logger = logging.getLogger(__name__)

FORMAT_NAME = "ulsad-bundle"
FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    frn: Optional[FRNConfig] = None
    gae: Optional[GlobalAEConfig] = None
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        bb = self.backbone
        if self.frn is None:
            self.frn = FRNConfig(in_channels=bb.width)
        if self.gae is None:
            self.gae = GlobalAEConfig(image_size=bb.image_size, out_channels=bb.width, out_size=bb.feature_size)
        if self.frn.in_channels != bb.width:
            raise ConfigError(f"FRN width {self.frn.in_channels} != projection width {bb.width}")
        g = self.gae
        if (g.image_size, g.out_channels, g.out_size) != (bb.image_size, bb.width, bb.feature_size):
            raise ConfigError(
                f"global autoencoder shape ({g.image_size}->{g.out_channels}x{g.out_size}) "
                f"does not match backbone ({bb.image_size}->{bb.width}x{bb.feature_size})"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            backbone=BackboneConfig(**d["backbone"]),
            frn=FRNConfig(**d["frn"]),
            gae=GlobalAEConfig(**d["gae"]),
            loss=LossConfig(**d["loss"]),
        )

    def fingerprint(self) -> str:
        arch = self.to_dict()
        arch.pop("loss")  # loss weights do not change parameter shapes
        blob = json.dumps(arch, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 2e-4
    weight_decay: float = 2e-5
    batch_size: int = 8
    accumulate: int = 1
    seed: int = 0
    use_global: bool = True
    global_loss: str = "attention"  # or "direct"
    use_lg: bool = True
    cache_features: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.batch_size < 1 or self.accumulate < 1:
            raise ConfigError("batch_size and accumulate must be >= 1")
        if self.global_loss not in ("attention", "direct"):
            raise ConfigError(f"global_loss must be 'attention' or 'direct', got {self.global_loss!r}")


class Forward(NamedTuple):
    u: torch.Tensor
    u_prime: torch.Tensor
    u_double_prime: torch.Tensor
    u_hat: Optional[torch.Tensor]


def state_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class ModelBundle(nn.Module):
    """Frozen feature pipeline + FRN (psi) + global autoencoder (phi) + fitted statistics."""

    def __init__(self, config: ModelConfig, features: Optional[FeaturePipeline] = None, seed: int = 0):
        super().__init__()
        self.config = config
        self.features = features if features is not None else FeaturePipeline(config.backbone)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.frn = FeatureReconstructionNetwork(config.frn)
            self.gae = GlobalAutoencoder(config.gae)
        self.stats: Optional[ChannelStats] = None
        self.calibration: Optional[QuantileCalibration] = None
        self.flags: Dict[str, object] = {"use_global": True, "global_loss": "attention", "use_lg": True}
        self.history: List[dict] = []

    def raw_features(self, x: torch.Tensor) -> torch.Tensor:
        return self.features(x)

    def normalized(self, u: torch.Tensor) -> torch.Tensor:
        if self.stats is None:
            raise ConfigError("channel statistics have not been fitted")
        return normalize_features(u, self.stats)

    def forward(self, x: torch.Tensor, u: Optional[torch.Tensor] = None) -> Forward:
        if u is None:
            u = self.normalized(self.raw_features(x))
        rec = self.frn(u)
        u_hat = self.gae(self.features.extractor.preprocess(x)) if self.flags["use_global"] else None
        return Forward(u, rec.u_prime, rec.u_double_prime, u_hat)


def fit_channel_stats(images, pipeline: FeaturePipeline, batch_size: int = 8) -> ChannelStats:
    """Channel-wise mean/std pooled over all positions of all images (one pass)."""
    acc = ChannelMoments()
    n = 0
    for batch in _iter_image_batches(images, batch_size):
        acc.update(pipeline(batch))
        n += batch.shape[0]
    if n == 0:
        raise DataError("cannot fit channel statistics on an empty dataset")
    return acc.finalize()


def _iter_image_batches(images, batch_size):
    if isinstance(images, torch.Tensor):
        for i in range(0, images.shape[0], batch_size):
            yield images[i:i + batch_size]
        return
    buf = []
    for img in images:
        buf.append(img)
        if len(buf) == batch_size:
            yield torch.stack(buf)
            buf = []
    if buf:
        yield torch.stack(buf)


def _batches(order: torch.Tensor, batch_size: int) -> List[torch.Tensor]:
    chunks = list(torch.split(order, batch_size))
    # batch-norm after the 1x1 bottleneck cannot train on a single sample
    if len(chunks) > 1 and chunks[-1].numel() == 1:
        last = chunks.pop()
        chunks[-1] = torch.cat([chunks[-1], last])
    return chunks


def compute_losses(bundle: ModelBundle, x: torch.Tensor, u: torch.Tensor, cfg: TrainConfig) -> Dict[str, torch.Tensor]:
    """The three loss terms of one training step; disabled terms are exact zeros."""
    loss_cfg = bundle.config.loss
    out = bundle.forward(x, u)
    z = flatten(out.u)
    l_l = loss_pl(flatten(out.u_prime), z, loss_cfg)
    zero = torch.zeros((), dtype=l_l.dtype)
    l_g, l_lg = zero, zero
    if cfg.use_global:
        z_hat = flatten(out.u_hat)
        l_g = consistency_loss(z, z_hat, loss_cfg, cfg.global_loss)
        if cfg.use_lg:
            l_lg = loss_lg(flatten(out.u_double_prime), z_hat, loss_cfg)
    # summed in double so the logged total reconciles with its parts
    total = l_l.double() + l_g.double() + l_lg.double()
    return {"l_l": l_l, "l_g": l_g, "l_lg": l_lg, "total": total}


def train(
    images: torch.Tensor,
    model_config: ModelConfig,
    cfg: TrainConfig = TrainConfig(),
    bundle: Optional[ModelBundle] = None,
    on_step: Optional[Callable[[dict], None]] = None,
) -> ModelBundle:
    """Fit channel statistics, then optimise psi and phi on normal images only.

    ``images`` is a float tensor (N, 3, H, W) with values in [0, 1].
    """
    if not isinstance(images, torch.Tensor) or images.ndim != 4:
        raise DataError("training images must be a (N, 3, H, W) tensor")
    n = images.shape[0]
    if n == 0:
        raise DataError("training set is empty")
    if cfg.use_global and n < 2 and cfg.epochs > 0:
        raise DataError("the global branch needs at least two training images per batch")

    torch.manual_seed(cfg.seed)
    if bundle is None:
        bundle = ModelBundle(model_config, seed=cfg.seed)
    bundle.flags = {"use_global": cfg.use_global, "global_loss": cfg.global_loss, "use_lg": cfg.use_lg}
    bundle.stats = fit_channel_stats(images, bundle.features, cfg.batch_size)
    logger.info("fitted channel statistics on %d images", n)

    cached = None
    if cfg.cache_features:
        cached = torch.cat([bundle.normalized(bundle.raw_features(b)) for b in _iter_image_batches(images, cfg.batch_size)])

    params = list(bundle.frn.parameters())
    if cfg.use_global:
        params += list(bundle.gae.parameters())
    opt = torch.optim.Adam(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)

    bundle.history = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        bundle.frn.train()
        bundle.gae.train(cfg.use_global)
        sums = {"l_l": 0.0, "l_g": 0.0, "l_lg": 0.0, "total": 0.0}
        batches = _batches(torch.randperm(n, generator=gen), cfg.batch_size)
        opt.zero_grad(set_to_none=True)
        for b, idx in enumerate(batches):
            x = images[idx]
            u = cached[idx] if cached is not None else None
            losses = compute_losses(bundle, x, u, cfg)
            for name, val in losses.items():
                if not torch.isfinite(val):
                    raise NumericError(f"non-finite {name} ({val.item()}) at epoch {epoch}, batch {b}")
            (losses["total"] / cfg.accumulate).backward()
            if (b + 1) % cfg.accumulate == 0 or b + 1 == len(batches):
                opt.step()
                opt.zero_grad(set_to_none=True)
            rec = {"epoch": epoch, "step": step, "batch": b, **{k: float(v.detach()) for k, v in losses.items()}}
            step += 1
            for k in sums:
                sums[k] += rec[k]
            if on_step is not None:
                on_step(rec)
        means = {k: v / len(batches) for k, v in sums.items()}
        bundle.history.append({"epoch": epoch, **means})
        logger.info("epoch %d/%d total=%.5f l_l=%.5f l_g=%.5f l_lg=%.5f", epoch, cfg.epochs,
                    means["total"], means["l_l"], means["l_g"], means["l_lg"])
    bundle.eval()
    return bundle


# --------------------------------------------------------------------------
# persistence: a numpy .npz container, no pickled objects


def _module_arrays(prefix: str, module: nn.Module) -> Dict[str, np.ndarray]:
    return {f"{prefix}/{k}": v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_bundle(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    if bundle.stats is None:
        raise PersistenceError("refusing to save a bundle without fitted channel statistics")
    header = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "config": bundle.config.to_dict(),
        "fingerprint": bundle.config.fingerprint(),
        "backbone_hash": state_hash(bundle.features),
        "flags": bundle.flags,
        "calibration": bundle.calibration.to_dict() if bundle.calibration else None,
        "history": bundle.history,
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header, default=list).encode(), dtype=np.uint8),
        "stats/mu": bundle.stats.mu,
        "stats/sigma": bundle.stats.sigma,
        **_module_arrays("frn", bundle.frn),
        **_module_arrays("gae", bundle.gae),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    return path


def read_header(path) -> dict:
    try:
        with np.load(path, allow_pickle=False) as f:
            header = json.loads(bytes(f["header"]).decode())
    except Exception as exc:
        raise PersistenceError(f"{path} is not a readable bundle: {exc}") from exc
    if header.get("format") != FORMAT_NAME:
        raise PersistenceError(f"{path} is not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise PersistenceError(f"unsupported bundle version {header.get('version')} (expected {FORMAT_VERSION})")
    return header


def load_bundle(path, expected: Optional[ModelConfig] = None) -> ModelBundle:
    """Load a bundle; if ``expected`` is given its fingerprint must match the file's."""
    header = read_header(path)
    config = ModelConfig.from_dict(header["config"])
    if config.fingerprint() != header["fingerprint"]:
        raise PersistenceError("bundle header is inconsistent (fingerprint mismatch)")
    if expected is not None and expected.fingerprint() != header["fingerprint"]:
        raise PersistenceError(
            f"bundle was trained with a different model configuration "
            f"(file {header['fingerprint']}, requested {expected.fingerprint()})"
        )
    bundle = ModelBundle(config)
    if state_hash(bundle.features) != header["backbone_hash"]:
        raise PersistenceError("backbone weights differ from the ones used for training")
    try:
        with np.load(path, allow_pickle=False) as f:
            data = {k: f[k] for k in f.files}
        for prefix, module in (("frn", bundle.frn), ("gae", bundle.gae)):
            state = {k[len(prefix) + 1:]: torch.from_numpy(v.copy()) for k, v in data.items() if k.startswith(prefix + "/")}
            module.load_state_dict(state, strict=True)
        bundle.stats = ChannelStats(data["stats/mu"], data["stats/sigma"])
    except PersistenceError:
        raise
    except Exception as exc:
        raise PersistenceError(f"corrupt bundle {path}: {exc}") from exc
    bundle.flags = header["flags"]
    bundle.history = header.get("history", [])
    if header.get("calibration"):
        bundle.calibration = QuantileCalibration(**header["calibration"])
    bundle.eval()
    return bundle


