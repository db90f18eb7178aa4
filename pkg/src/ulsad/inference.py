"""Anomaly maps, quantile calibration, map fusion and image scores."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from typing import List, NamedTuple, Optional

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .errors import CalibrationError, ConfigError, ShapeError
from .local_branch import LossConfig, column_distance

logger = logging.getLogger(__name__)

KINDS = ("local", "global", "combined")


@dataclass
class AnomalyMap:
    data: np.ndarray  # (h, w) or a stack (n, h, w)
    kind: str = "local"
    calibrated: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.kind not in KINDS:
            raise ConfigError(f"unknown map kind {self.kind!r}")
        if self.data.ndim not in (2, 3):
            raise ShapeError(f"anomaly map must be (h, w) or (n, h, w), got {self.data.shape}")


@dataclass
class QuantileCalibration:
    q_alpha_l: float
    q_beta_l: float
    q_alpha_g: Optional[float] = None
    q_beta_g: Optional[float] = None
    alpha: float = 0.9
    beta: float = 0.995

    def __post_init__(self):
        check_levels(self.alpha, self.beta)
        pairs = [("local", self.q_alpha_l, self.q_beta_l)]
        if self.q_alpha_g is not None:
            pairs.append(("global", self.q_alpha_g, self.q_beta_g))
        for name, qa, qb in pairs:
            if not qa < qb:
                raise CalibrationError(
                    f"degenerate {name} quantiles q_alpha={qa} >= q_beta={qb}; "
                    "the validation maps are (nearly) constant - use more or more varied validation "
                    "images, or widen alpha/beta"
                )

    def to_dict(self) -> dict:
        return asdict(self)


def check_levels(alpha: float, beta: float) -> None:
    if not 0 < alpha < beta < 1:
        raise ConfigError(f"need 0 < alpha < beta < 1, got alpha={alpha}, beta={beta}")


def _pair_map(a: torch.Tensor, b: torch.Tensor, lam: float, eps: float) -> torch.Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    if a.ndim < 3:
        raise ShapeError("feature maps need (c, h, w) dimensions")
    return column_distance(a, b, lam, eps, dim=-3)


def local_map(u: torch.Tensor, u_tilde_prime: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    """Per-position l_v + lambda_l * l_d between reconstruction and features."""
    return _pair_map(u_tilde_prime, u, cfg.lambda_l, cfg.epsilon_norm)


def global_map(u_tilde_double_prime: torch.Tensor, u_hat: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return _pair_map(u_tilde_double_prime, u_hat, cfg.lambda_g, cfg.epsilon_norm)


def empirical_quantile(values: np.ndarray, level: float) -> float:
    """Nearest-rank (inverted CDF) quantile: the ceil(level * n)-th smallest value."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise CalibrationError("cannot take a quantile of an empty pool")
    return float(np.quantile(values, level, method="inverted_cdf"))


def fit_quantiles(local_maps, global_maps=None, alpha: float = 0.9, beta: float = 0.995) -> QuantileCalibration:
    """Pool all pixels of each branch's validation maps and take the alpha/beta quantiles."""
    check_levels(alpha, beta)
    pool_l = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in local_maps]) if len(local_maps) else []
    if len(pool_l) == 0:
        raise CalibrationError("validation set is empty")
    kw = {}
    if global_maps is not None:
        pool_g = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in global_maps])
        kw = dict(q_alpha_g=empirical_quantile(pool_g, alpha), q_beta_g=empirical_quantile(pool_g, beta))
    return QuantileCalibration(
        q_alpha_l=empirical_quantile(pool_l, alpha), q_beta_l=empirical_quantile(pool_l, beta),
        alpha=alpha, beta=beta, **kw,
    )


def normalize_map(m, q_alpha: float, q_beta: float):
    """Affine map sending q_alpha to 0 and q_beta to 0.1."""
    if not q_alpha < q_beta:
        raise CalibrationError(f"degenerate quantiles q_alpha={q_alpha}, q_beta={q_beta}")
    if isinstance(m, AnomalyMap):
        return AnomalyMap(normalize_map(m.data, q_alpha, q_beta), m.kind, calibrated=True)
    return 0.1 * (np.asarray(m, dtype=np.float64) - q_alpha) / (q_beta - q_alpha)


def combine_maps(local: AnomalyMap, glob: AnomalyMap) -> AnomalyMap:
    if not (isinstance(local, AnomalyMap) and isinstance(glob, AnomalyMap)):
        raise ConfigError("combine_maps expects AnomalyMap instances")
    if not (local.calibrated and glob.calibrated):
        raise CalibrationError("both maps must be calibrated before fusion")
    if local.data.shape != glob.data.shape:
        raise ShapeError(f"map shapes differ: {local.data.shape} vs {glob.data.shape}")
    return AnomalyMap((local.data + glob.data) / 2.0, "combined", calibrated=True)


def image_score(m) -> float:
    data = m.data if isinstance(m, AnomalyMap) else np.asarray(m)
    if data.size == 0:
        raise ShapeError("empty anomaly map")
    return float(data.max())


def upsample_map(m, size: int, sigma: float = 4.0) -> np.ndarray:
    """Bilinear (half-pixel centres) upsampling of (h, w) or (n, h, w) maps, then optional Gaussian blur."""
    data = m.data if isinstance(m, AnomalyMap) else np.asarray(m, dtype=np.float64)
    squeeze = data.ndim == 2
    if squeeze:
        data = data[None]
    h, w = data.shape[-2:]
    if size < h or size < w:
        raise ShapeError(f"target size {size} is smaller than the map ({h}x{w})")
    t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float64))[:, None]
    up = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)[:, 0].numpy()
    if sigma > 0:
        up = np.stack([ndimage.gaussian_filter(x, sigma=sigma, mode="reflect", truncate=4.0) for x in up])
    return up[0] if squeeze else up


# --------------------------------------------------------------------------
# model-level helpers (operate on a trained ModelBundle)


class RawMaps(NamedTuple):
    local: np.ndarray  # (n, h*, w*)
    glob: Optional[np.ndarray]


@torch.no_grad()
def compute_raw_maps(bundle, images: torch.Tensor, batch_size: int = 8) -> RawMaps:
    """Raw local and global maps at feature resolution for a stack of images."""
    bundle.eval()
    loss_cfg = bundle.config.loss
    loc, glo = [], []
    for start in range(0, images.shape[0], batch_size):
        x = images[start:start + batch_size]
        out = bundle.forward(x)
        loc.append(local_map(out.u, out.u_prime, loss_cfg).numpy())
        if out.u_hat is not None:
            ref = out.u_double_prime if bundle.flags.get("use_lg", True) else out.u
            glo.append(global_map(ref, out.u_hat, loss_cfg).numpy())
    return RawMaps(np.concatenate(loc).astype(np.float64), np.concatenate(glo).astype(np.float64) if glo else None)


def calibrate(bundle, images: torch.Tensor, alpha: float = 0.9, beta: float = 0.995, batch_size: int = 8) -> QuantileCalibration:
    if images is None or len(images) == 0:
        raise CalibrationError("validation set is empty")
    raw = compute_raw_maps(bundle, images, batch_size)
    cal = fit_quantiles(raw.local, raw.glob, alpha, beta)
    bundle.calibration = cal
    logger.info("calibration: %s", cal)
    return cal


@dataclass
class Prediction:
    score: float
    combined: np.ndarray  # (h*, w*) calibrated
    local: np.ndarray  # (h*, w*) calibrated
    glob: Optional[np.ndarray]
    local_score: float
    global_score: Optional[float]

    def upsampled(self, size: int, sigma: float = 4.0, which: str = "combined") -> np.ndarray:
        return upsample_map({"combined": self.combined, "local": self.local, "global": self.glob}[which], size, sigma)


def predict(bundle, images: torch.Tensor, batch_size: int = 8) -> List[Prediction]:
    cal = bundle.calibration
    if cal is None:
        raise CalibrationError("bundle is not calibrated; run calibration on validation images first")
    raw = compute_raw_maps(bundle, images, batch_size)
    ml = normalize_map(AnomalyMap(raw.local, "local"), cal.q_alpha_l, cal.q_beta_l)
    if raw.glob is not None:
        if cal.q_alpha_g is None:
            raise CalibrationError("calibration has no global quantiles")
        mg = normalize_map(AnomalyMap(raw.glob, "global"), cal.q_alpha_g, cal.q_beta_g)
        comb = combine_maps(ml, mg)
    else:
        mg = None
        comb = AnomalyMap(ml.data, "combined", calibrated=True)
    preds = []
    for i in range(raw.local.shape[0]):
        preds.append(Prediction(
            score=image_score(comb.data[i]),
            combined=comb.data[i],
            local=ml.data[i],
            glob=None if mg is None else mg.data[i],
            local_score=image_score(ml.data[i]),
            global_score=None if mg is None else image_score(mg.data[i]),
        ))
    return preds
