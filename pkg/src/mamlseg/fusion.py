"""Modality-aware fusion of per-modality embeddings.

Pipeline for modalities ``m_1 < m_2 < ...`` (lexicographic order):

1. ``dual = conv(cat(F_m1, F_m2, ...))`` maps ``N*C`` channels back to ``C``.
2. For each modality ``A_i = sigmoid(f_a_i(cat(dual, F_i)))`` where ``f_a_i`` is
   a 3x3x3 conv (2C -> hidden) and a 1x1x1 conv (hidden -> 1), each followed
   by instance norm and leaky ReLU. ``A_i`` is one channel, broadcast over C.
3. ``F_att = sum_i A_i * F_i`` (unnormalised; the weights need not sum to 1).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import ConvNormAct, SegmentationHead


@dataclass
class FusionConfig:
    attention_hidden: int | None = None  # defaults to C // 2
    dual_kernel: int = 1
    norm_epsilon: float = 1e-5
    leaky_slope: float = 0.01

    def hidden_for(self, channels):
        return self.attention_hidden or max(channels // 2, 1)

    def to_dict(self):
        return asdict(self)


def canonical_order(modalities):
    return tuple(sorted(modalities))


def _check_same_shape(tensors, what):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ValueError(f"{what}: shape mismatch {sorted(shapes)}")


class DualConv(nn.Module):
    """Concatenate per-modality features in canonical order and project to C channels."""

    def __init__(self, modalities, channels, kernel=1):
        super().__init__()
        self.modalities = canonical_order(modalities)
        if len(self.modalities) < 2:
            raise ValueError("dual features need at least two modalities")
        self.channels = channels
        self.conv = nn.Conv3d(len(self.modalities) * channels, channels, kernel, padding=kernel // 2)

    def forward(self, features: dict):
        if set(features) != set(self.modalities):
            raise ValueError(f"expected modalities {self.modalities}, got {sorted(features)}")
        feats = [features[m] for m in self.modalities]
        _check_same_shape(feats, "make_dual")
        return self.conv(torch.cat(feats, dim=1))


class AttentionBranch(nn.Module):
    """f_a for one modality followed by the sigmoid."""

    def __init__(self, channels, hidden, eps=1e-5, slope=0.01):
        super().__init__()
        self.channels = channels
        self.block1 = ConvNormAct(2 * channels, hidden, kernel=3, eps=eps, slope=slope)
        self.block2 = ConvNormAct(hidden, 1, kernel=1, eps=eps, slope=slope)

    def forward(self, dual, feat):
        if dual.shape != feat.shape:
            raise ValueError(f"dual {tuple(dual.shape)} and feature {tuple(feat.shape)} differ")
        return torch.sigmoid(self.block2(self.block1(torch.cat([dual, feat], dim=1))))


def weighted_aggregate(pairs) -> torch.Tensor:
    """Sum of ``attention * feature`` over ``(attention, feature)`` pairs.

    Attention tensors have one channel and broadcast over the feature channels.
    """
    pairs = list(pairs)
    if not pairs:
        raise ValueError("nothing to aggregate")
    ref = pairs[0][1].shape
    out = None
    for att, feat in pairs:
        if feat.shape != ref:
            raise ValueError(f"feature shape {tuple(feat.shape)} != {tuple(ref)}")
        if att.shape[-3:] != feat.shape[-3:] or att.shape[-4] != 1:
            raise ValueError(f"attention shape {tuple(att.shape)} incompatible with {tuple(feat.shape)}")
        term = att * feat
        out = term if out is None else out + term
    return out


class ModalityAwareFusion(nn.Module):
    def __init__(self, modalities, channels=32, config: FusionConfig | None = None):
        super().__init__()
        self.config = cfg = config or FusionConfig()
        self.modalities = canonical_order(modalities)
        hidden = cfg.hidden_for(channels)
        self.dual = DualConv(self.modalities, channels, cfg.dual_kernel)
        self.attention = nn.ModuleDict(
            {m: AttentionBranch(channels, hidden, cfg.norm_epsilon, cfg.leaky_slope) for m in self.modalities}
        )

    def attention_for(self, modality, dual, feat):
        return self.attention[modality](dual, feat)

    def forward(self, features: dict):
        """Return ``(fused, attention_maps)``."""
        dual = self.dual(features)
        maps = {m: self.attention_for(m, dual, features[m]) for m in self.modalities}
        fused = weighted_aggregate((maps[m], features[m]) for m in self.modalities)
        return fused, maps


JointHead = SegmentationHead


def export_attention(attention, case, path):
    """Write an attention map on the case's voxel grid (same formats as volumes)."""
    from .io import save_array

    data = attention.detach().cpu().numpy() if isinstance(attention, torch.Tensor) else np.asarray(attention)
    data = np.squeeze(data)
    if data.shape != case.shape:
        raise ValueError(f"attention shape {data.shape} does not match case grid {case.shape}")
    return save_array(path, data.astype(np.float32), case.spacing, "attention")
