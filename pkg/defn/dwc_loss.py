"""
Dynamic Weight Composing Loss
Focal, boundary, dice, cross-entropy and deep-ranking terms blended by training phase
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import (BoundaryConfig, DeepRankingConfig, DiceConfig, FocalConfig, LossConfig,
                     WeightSchedule)
from .errors import ConfigError, DataError, NumericError

logger = logging.getLogger(__name__)

__all__ = [
    'LossBatch', 'make_loss_batch', 'focal_loss', 'boundary_loss', 'dice_loss', 'ce_loss',
    'deep_ranking_loss', 'schedule_weights', 'dwc_total', 'DWCLoss', 'WeightSchedule',
]

TERMS = ('focal', 'boundary', 'dice', 'ce')
DICECE_WEIGHTS = (0.0, 0.0, 0.5, 0.5)
REDUCE_DIMS = (0, 2, 3, 4)


@dataclass
class LossBatch:
    logits: torch.Tensor
    target: torch.Tensor

    def __post_init__(self):
        if self.logits.dim() != 5:
            raise DataError(f"Logits must be (B, C, D, H, W), got {tuple(self.logits.shape)}")
        if self.logits.shape != self.target.shape:
            raise DataError(f"Logits {tuple(self.logits.shape)} and target {tuple(self.target.shape)} differ")
        if not torch.isfinite(self.logits).all():
            raise NumericError("Logits contain NaN or Inf")
        if not ((self.target == 0) | (self.target == 1)).all():
            raise DataError("Target entries must be 0 or 1")
        if not (self.target.sum(dim=1) == 1).all():
            raise DataError("Target must hold exactly one class per voxel")

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def num_voxels(self) -> int:
        return self.logits.numel() // self.num_classes


def make_loss_batch(logits: torch.Tensor, labels: torch.Tensor, num_classes: Optional[int] = None) -> LossBatch:
    """One-hot encode a (B, D, H, W) label tensor against the logits"""
    num_classes = num_classes or logits.shape[1]
    labels = labels.long()
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise DataError(f"Labels outside 0..{num_classes - 1}")
    target = F.one_hot(labels, num_classes).permute(0, 4, 1, 2, 3).to(logits.dtype)
    return LossBatch(logits=logits, target=target)


def focal_loss(b: LossBatch, cfg: Optional[FocalConfig] = None) -> torch.Tensor:
    cfg = cfg or FocalConfig()
    log_probs = F.log_softmax(b.logits, dim=1)
    modulation = (1.0 - log_probs.exp()).clamp_min(0.0) ** cfg.gamma
    return (-(modulation * log_probs * b.target)).sum(dim=1).mean()


def ce_loss(b: LossBatch) -> torch.Tensor:
    log_probs = F.log_softmax(b.logits, dim=1)
    return (-(log_probs * b.target)).sum(dim=1).mean()


def _boundary_field(x: torch.Tensor, kernel: int) -> torch.Tensor:
    """Local mean over in-bounds neighbours minus the voxel itself; any spatial size"""
    pad = (kernel // 2,) * 6
    summed = F.avg_pool3d(F.pad(x, pad), kernel, stride=1, padding=0)
    inside = F.avg_pool3d(F.pad(torch.ones_like(x[:, :1]), pad), kernel, stride=1, padding=0)
    return summed / inside - x


def boundary_loss(b: LossBatch, cfg: Optional[BoundaryConfig] = None) -> torch.Tensor:
    """MSE between local-mean residuals of probabilities and targets"""
    cfg = cfg or BoundaryConfig()
    probs = F.softmax(b.logits, dim=1)
    diff = _boundary_field(probs, cfg.kernel) - _boundary_field(b.target, cfg.kernel)
    return (diff ** 2).mean()


def dice_loss(b: LossBatch, cfg: Optional[DiceConfig] = None) -> torch.Tensor:
    cfg = cfg or DiceConfig()
    probs = F.softmax(b.logits, dim=1)
    intersection = (probs * b.target).sum(dim=REDUCE_DIMS)
    pred_sum = probs.sum(dim=REDUCE_DIMS)
    target_sum = b.target.sum(dim=REDUCE_DIMS)
    per_class = 1.0 - (2.0 * intersection + cfg.eps_numerator) / (pred_sum + target_sum + cfg.eps_denominator)
    return per_class.mean()


def _sample(count: int, n: int, generator: torch.Generator) -> torch.Tensor:
    if count >= n:
        return torch.randperm(count, generator=generator)[:n]
    return torch.randint(0, count, (n,), generator=generator)


def present_foreground(target: torch.Tensor) -> list:
    counts = target.sum(dim=REDUCE_DIMS)
    return [c for c in range(1, target.shape[1]) if counts[c] > 0]


def deep_ranking_loss(b: LossBatch, cfg: Optional[DeepRankingConfig] = None) -> torch.Tensor:
    """Hinge pulling sampled class probabilities toward the class anchor and pushing others away"""
    cfg = cfg or DeepRankingConfig()
    classes = present_foreground(b.target)
    if not classes:
        raise DataError("Deep-ranking loss needs at least one foreground class in the batch")

    probs = F.softmax(b.logits, dim=1)
    generator = torch.Generator(device='cpu')
    generator.manual_seed(cfg.seed)
    terms = []
    for c in classes:
        p_c = probs[:, c].reshape(-1)
        is_c = b.target[:, c].reshape(-1) > 0.5
        pos_idx = torch.nonzero(is_c, as_tuple=False).squeeze(1)
        neg_idx = torch.nonzero(~is_c, as_tuple=False).squeeze(1)
        anchor = p_c[pos_idx].mean()

        positives = p_c[pos_idx[_sample(pos_idx.numel(), cfg.n_pos, generator).to(pos_idx.device)]]
        pull = ((positives - anchor) ** 2).sum()
        if neg_idx.numel():
            negatives = p_c[neg_idx[_sample(neg_idx.numel(), cfg.n_neg, generator).to(neg_idx.device)]]
            push = ((negatives - anchor) ** 2).sum()
        else:
            push = torch.zeros((), dtype=p_c.dtype, device=p_c.device)
        terms.append(F.relu(cfg.margin + pull - push))
    return torch.stack(terms).mean()


def schedule_weights(tau: float, s: Optional[WeightSchedule] = None) -> Tuple[float, float, float, float]:
    """(focal, boundary, dice, ce) weights linearly interpolated at training fraction tau"""
    s = s or WeightSchedule()
    if not 0.0 <= tau <= 1.0 or not np.isfinite(tau):
        raise ConfigError(f"tau must lie in [0, 1], got {tau}")
    w = (1.0 - tau) * np.asarray(s.start, dtype=np.float64) + tau * np.asarray(s.end, dtype=np.float64)
    w = w / w.sum()
    return tuple(float(x) for x in w)


def dwc_total(b: LossBatch, tau: float, config: Optional[LossConfig] = None) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Weighted composite plus beta * deep-ranking; the breakdown holds raw terms and weights"""
    config = config or LossConfig()
    if config.mode == 'dicece':
        weights, beta = DICECE_WEIGHTS, 0.0
    else:
        weights, beta = schedule_weights(tau, config.schedule), config.schedule.beta

    values = {
        'focal': focal_loss(b, config.focal),
        'boundary': boundary_loss(b, config.boundary),
        'dice': dice_loss(b, config.dice),
        'ce': ce_loss(b),
    }
    total = sum(w * values[name] for w, name in zip(weights, TERMS))

    rank_value = float('nan')
    if beta > 0.0:
        if present_foreground(b.target):
            rank = deep_ranking_loss(b, config.ranking)
            total = total + beta * rank
            rank_value = float(rank.detach())
        else:
            logger.debug("No foreground in batch, deep-ranking term skipped")

    breakdown = {f"lambda{i + 1}": float(w) for i, w in enumerate(weights)}
    breakdown.update({f"L_{name}": float(values[name].detach()) for name in TERMS})
    breakdown['L_rank'] = rank_value
    breakdown['beta'] = float(beta)
    breakdown['total'] = float(total.detach())
    if not np.isfinite(breakdown['total']):
        raise NumericError(f"Non-finite composite loss: {breakdown}")
    return total, breakdown


class DWCLoss(nn.Module):
    def __init__(self, config: Optional[LossConfig] = None, num_classes: int = 4):
        super().__init__()
        self.config = config or LossConfig()
        self.num_classes = num_classes

    def forward(self, logits: torch.Tensor, labels: torch.Tensor, tau: float) -> Tuple[torch.Tensor, Dict[str, float]]:
        return dwc_total(make_loss_batch(logits, labels, self.num_classes), tau, self.config)
