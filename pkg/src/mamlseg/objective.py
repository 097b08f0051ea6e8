"""Segmentation losses and the mutual-learning objective.

``total = lam * sum_i seg_loss(intra_i) + seg_loss(joint)`` where
``seg_loss = cross_entropy + soft_dice`` (unweighted). An optional peer
mimicry term (KL from each detached peer to each intra prediction) is off
by default and is added to ``total`` only when its weight is non-zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core import Mask

DICE_SMOOTH = 1e-5
LOG_CLAMP = 1e-12


def _target(gt, like: torch.Tensor) -> torch.Tensor:
    if isinstance(gt, Mask):
        gt = gt.data
    g = torch.as_tensor(np.asarray(gt) if not isinstance(gt, torch.Tensor) else gt, device=like.device).to(like.dtype)
    # accept D,H,W / B,D,H,W / B,1,D,H,W targets against B,2,D,H,W or 2,D,H,W predictions
    if like.dim() == 4:
        expected = like.shape[1:]
    else:
        expected = (like.shape[0], *like.shape[2:])
        if g.dim() == 5:
            g = g[:, 0]
    if tuple(g.shape) != tuple(expected):
        raise ValueError(f"target shape {tuple(g.shape)} incompatible with prediction {tuple(like.shape)}")
    return g


def _foreground(pred):
    return pred[1] if pred.dim() == 4 else pred[:, 1]


def soft_dice_loss(pred: torch.Tensor, gt, smooth: float = DICE_SMOOTH) -> torch.Tensor:
    g = _target(gt, pred)
    p = _foreground(pred)
    inter = (p * g).sum()
    return 1 - (2 * inter + smooth) / (p.sum() + g.sum() + smooth)


def cross_entropy_loss(pred: torch.Tensor, gt) -> torch.Tensor:
    g = _target(gt, pred)
    p_fg = _foreground(pred)
    p_bg = pred[0] if pred.dim() == 4 else pred[:, 0]
    p_true = torch.where(g > 0.5, p_fg, p_bg)
    return -torch.log(p_true.clamp_min(LOG_CLAMP)).mean()


def seg_loss(pred, gt):
    return cross_entropy_loss(pred, gt) + soft_dice_loss(pred, gt)


def peer_mimicry(intra_preds: dict) -> torch.Tensor:
    """Sum over ordered pairs (i, j), i != j, of KL(p_j.detach() || p_i), voxel-averaged."""
    total = 0.0
    for i, p_i in intra_preds.items():
        log_i = torch.log(p_i.clamp_min(LOG_CLAMP))
        for j, p_j in intra_preds.items():
            if i == j:
                continue
            q = p_j.detach()
            kl = (q * (torch.log(q.clamp_min(LOG_CLAMP)) - log_i)).sum(dim=-4)
            total = total + kl.mean()
    return total


def _scalar(v):
    return float(v.detach()) if isinstance(v, torch.Tensor) else float(v)


@dataclass
class LossBreakdown:
    intra: dict
    joint: torch.Tensor
    total: torch.Tensor
    lam: float
    mimicry: torch.Tensor | float = 0.0
    extra: dict = field(default_factory=dict)

    def as_record(self):
        return {
            "intra": {m: _scalar(v) for m, v in self.intra.items()},
            "joint": _scalar(self.joint),
            "mimicry": _scalar(self.mimicry),
            "total": _scalar(self.total),
            "lambda": self.lam,
        }


def combine(intra: dict, joint, lam: float, mimicry=0.0) -> LossBreakdown:
    """Assemble the objective from already computed component losses."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    total = lam * sum(intra[m] for m in sorted(intra)) + joint + mimicry
    return LossBreakdown(dict(intra), joint, total, lam, mimicry)


def mutual_learning_loss(intra_preds: dict, joint_pred, gt, lam: float = 0.5,
                         modalities=None, mimicry_weight: float = 0.0) -> LossBreakdown:
    if modalities is not None and set(intra_preds) != set(modalities):
        raise ValueError(f"predictions for {sorted(intra_preds)} but configured {sorted(modalities)}")
    intra = {m: seg_loss(p, gt) for m, p in sorted(intra_preds.items())}
    joint = seg_loss(joint_pred, gt)
    mim = mimicry_weight * peer_mimicry(intra_preds) if mimicry_weight else 0.0
    return combine(intra, joint, lam, mim)
