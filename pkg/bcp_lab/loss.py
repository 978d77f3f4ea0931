"""
Dice + cross-entropy segmentation losses, with per-voxel weights that encode
the provenance of each voxel's supervision.

For a mixed image whose mask ``M`` marks the labeled background, voxels
supervised by ground truth weigh 1 and voxels supervised by pseudo-labels
weigh α::

    w_in  = M + α(1 − M)          w_out = (1 − M) + αM

Each direction's loss is ``ce_weight · mean(w·ce)/mean(w) + dice_weight ·
weighted_dice(q, y, w)`` and ``l_all = l_in + l_out``.
"""

from dataclasses import dataclass, field
import logging
from typing import Dict, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .maskgen import Mask
from .mixer import one_hot

__all__ = [
    "LossConfig",
    "LossReport",
    "bcp_loss",
    "per_voxel_ce",
    "seg_loss",
    "soft_seg_loss",
    "weighted_dice",
]

default_logger = logging.getLogger(__name__)

CE_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig(object):
    alpha: float = 0.5
    "Weight of pseudo-supervised voxels relative to ground-truth voxels."

    dice_weight: float = 0.5
    ce_weight: float = 0.5
    dice_eps: float = 1e-5

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"LossConfig.alpha must be > 0; got {self.alpha}")
        if self.dice_weight < 0 or self.ce_weight < 0:
            raise ValueError("LossConfig weights must be >= 0")
        if self.dice_weight == 0 and self.ce_weight == 0:
            raise ValueError("LossConfig.dice_weight and ce_weight cannot both be zero")
        if not self.dice_eps > 0:
            raise ValueError(f"LossConfig.dice_eps must be > 0; got {self.dice_eps}")


@dataclass
class LossReport(object):
    total: Tensor
    "The differentiable ``l_all``."

    l_in: float
    l_out: float
    l_all: float
    breakdown: Dict[str, float] = field(default_factory=dict)
    "Per-term values: ``dice_in``, ``ce_in``, ``dice_out``, ``ce_out``, ..."

    flags: Dict[str, bool] = field(default_factory=dict)
    "``zero_weight_in``/``zero_weight_out`` when a weight map was all zero."

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.l_all))


def _onehot_batch(y: np.ndarray, num_classes: int) -> np.ndarray:
    return one_hot(y, num_classes, axis=1)


def per_voxel_ce(q: Tensor, y: np.ndarray) -> Tensor:
    """
    Per-voxel cross-entropy ``−log q[y]`` as a ``[B,1,...]`` map, with
    probabilities floored at 1e-12.
    """
    y = np.asarray(y)
    if y.shape != (q.shape[0],) + q.shape[2:]:
        raise ValueError(f"label shape {y.shape} does not match probability shape {q.shape}")

    target = ad.const(_onehot_batch(y, q.shape[1]))
    return _soft_ce_map(q, target)


def _soft_ce_map(q: Tensor, target: Tensor) -> Tensor:
    # −Σ_k t_k log q_k, with the log floored; for one-hot t this is −log q[y].
    logq = ad.log(ad.clamp_min(q, CE_FLOOR))
    return ad.scale(ad.reduce_sum(ad.mul(logq, target), axis=1, keepdims=True), -1.0)


def _weight_tensor(q: Tensor, w: Optional[np.ndarray]) -> np.ndarray:
    shape = (q.shape[0], 1) + q.shape[2:]
    if w is None:
        return np.ones(shape)

    w = np.asarray(w, dtype=np.float64)
    if w.shape != shape:
        w = np.broadcast_to(w, shape)
    if (w < 0).any():
        raise ValueError("voxel weights must be >= 0")
    return w


def _dice_from_target(q: Tensor, target: np.ndarray, w: np.ndarray, eps: float) -> Tensor:
    """
    Mean over non-background classes of
    ``1 − (2Σ w·q_c·t_c + ε)/(Σ w·q_c + Σ w·t_c + ε)``, sums taken over the
    whole batch.
    """
    K = q.shape[1]
    axes = (0,) + tuple(range(2, q.values.ndim))
    wt = ad.const(w)

    wq = ad.mul(q, wt)
    inter = ad.reduce_sum(ad.mul(wq, ad.const(target)), axis=axes)
    psum = ad.reduce_sum(wq, axis=axes)
    tsum = ad.const((w * target).sum(axis=axes))

    num = ad.add(ad.scale(inter, 2.0), ad.const(np.full(K, eps)))
    den = ad.add(ad.add(psum, tsum), ad.const(np.full(K, eps)))
    per_class = ad.sub(ad.const(np.ones(K)), ad.div(num, den))

    select = np.ones(K) / (K - 1)
    select[0] = 0.0
    return ad.reduce_sum(ad.mul(per_class, ad.const(select)))


def weighted_dice(q: Tensor, y: np.ndarray, w: Optional[np.ndarray] = None, eps: float = 1e-5) -> Tensor:
    """
    Soft Dice loss with per-voxel weights ``w`` (``[B,1,...]`` or
    broadcastable to it), averaged over all non-background classes. A class
    absent from both prediction and target contributes ``1 − ε/ε = 0``.
    """
    y = np.asarray(y)
    if y.shape != (q.shape[0],) + q.shape[2:]:
        raise ValueError(f"label shape {y.shape} does not match probability shape {q.shape}")

    w = _weight_tensor(q, w)
    if not w.any():
        return ad.const(0.0)

    return _dice_from_target(q, _onehot_batch(y, q.shape[1]), w, eps)


def _weighted_ce(ce_map: Tensor, w: np.ndarray) -> Tensor:
    mean_w = float(w.mean())
    if mean_w == 0:
        return ad.const(0.0)
    return ad.scale(ad.reduce_mean(ad.mul(ce_map, ad.const(w))), 1.0 / mean_w)


def seg_loss(
    q: Tensor,
    y: np.ndarray,
    w: Optional[np.ndarray] = None,
    cfg: LossConfig = LossConfig(),
    terms: Optional[Dict[str, float]] = None,
    prefix: str = "",
) -> Tensor:
    """
    One direction of the weighted Dice + CE loss. With ``w`` omitted every
    voxel weighs 1, which is the plain supervised loss.
    """
    w = _weight_tensor(q, w)
    ce = _weighted_ce(per_voxel_ce(q, y), w)
    dice = weighted_dice(q, y, w, eps=cfg.dice_eps)

    if terms is not None:
        terms[f"ce{prefix}"] = ce.item()
        terms[f"dice{prefix}"] = dice.item()

    return ad.add(ad.scale(ce, cfg.ce_weight), ad.scale(dice, cfg.dice_weight))


def soft_seg_loss(
    q: Tensor,
    target: np.ndarray,
    w: Optional[np.ndarray] = None,
    cfg: LossConfig = LossConfig(),
) -> Tensor:
    """
    Dice + CE against soft per-class targets ``[B,K,...]``, as produced by
    Mixup.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != q.shape:
        raise ValueError(f"soft target shape {target.shape} does not match probability shape {q.shape}")

    w = _weight_tensor(q, w)
    ce = _weighted_ce(_soft_ce_map(q, ad.const(target)), w)
    dice = _dice_from_target(q, target, w, cfg.dice_eps) if w.any() else ad.const(0.0)
    return ad.add(ad.scale(ce, cfg.ce_weight), ad.scale(dice, cfg.dice_weight))


def _direction_weights(mask: Mask, alpha: float, labeled_where_one: bool, batch: int) -> np.ndarray:
    m = mask.bits.astype(np.float64)
    if labeled_where_one:
        w = m + alpha * (1.0 - m)
    else:
        w = (1.0 - m) + alpha * m
    return np.broadcast_to(w, (batch, 1) + mask.shape)


def bcp_loss(
    q_in: Optional[Tensor],
    q_out: Optional[Tensor],
    y_in: Optional[np.ndarray],
    y_out: Optional[np.ndarray],
    mask: Mask,
    cfg: LossConfig = LossConfig(),
) -> LossReport:
    """
    The bidirectional loss. ``X^in`` keeps the labeled image where M = 1, so
    its pseudo-labeled voxels are where M = 0; ``X^out`` is the reverse. A
    direction passed as None contributes exactly 0.
    """
    terms: Dict[str, float] = {}
    flags: Dict[str, bool] = {}
    parts = []

    for q, y, labeled_where_one, tag in ((q_in, y_in, True, "_in"), (q_out, y_out, False, "_out")):
        if q is None:
            parts.append(ad.const(0.0))
            continue

        if q.shape[2:] != mask.shape:
            raise ValueError(f"probability shape {q.shape} does not match mask shape {mask.shape}")

        w = _direction_weights(mask, cfg.alpha, labeled_where_one, q.shape[0])
        flags[f"zero_weight{tag}"] = not w.any()
        with ad.no_grad():
            terms[f"ce_raw{tag}"] = float((per_voxel_ce(q, y).values * w).mean())
        parts.append(seg_loss(q, y, w, cfg, terms, prefix=tag))

    total = ad.add(parts[0], parts[1])
    l_in = parts[0].item()
    l_out = parts[1].item()

    return LossReport(
        total=total,
        l_in=l_in,
        l_out=l_out,
        l_all=total.item(),
        breakdown=terms,
        flags=flags,
    )
