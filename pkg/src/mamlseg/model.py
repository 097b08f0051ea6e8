"""Full network: one backbone + head per modality, fusion, joint head."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import BackboneConfig, SegmentationHead, UNet3D
from .fusion import FusionConfig, JointHead, ModalityAwareFusion, canonical_order


@dataclass
class MAMLOutput:
    intra: dict
    joint: torch.Tensor
    attention: dict
    features: dict
    fused: torch.Tensor


class MAMLNet(nn.Module):
    def __init__(self, modalities, backbone: BackboneConfig | None = None,
                 fusion: FusionConfig | None = None):
        super().__init__()
        self.modalities = canonical_order(modalities)
        if len(self.modalities) < 2:
            raise ValueError("MAMLNet needs at least two modalities")
        self.backbone_config = backbone or BackboneConfig()
        self.fusion_config = fusion or FusionConfig()
        c = self.backbone_config.feature_channels
        self.backbones = nn.ModuleDict({m: UNet3D(self.backbone_config) for m in self.modalities})
        self.heads = nn.ModuleDict({m: SegmentationHead(c) for m in self.modalities})
        self.fusion = ModalityAwareFusion(self.modalities, c, self.fusion_config)
        self.joint_head = JointHead(c)

    def embed(self, inputs: dict) -> dict:
        missing = set(self.modalities) - set(inputs)
        if missing:
            raise KeyError(f"missing modalities {sorted(missing)}; use forward_single instead")
        return {m: self.backbones[m](inputs[m]) for m in self.modalities}

    def forward(self, inputs: dict) -> MAMLOutput:
        feats = self.embed(inputs)
        intra = {m: self.heads[m](feats[m]) for m in self.modalities}
        fused, att = self.fusion(feats)
        return MAMLOutput(intra, self.joint_head(fused), att, feats, fused)

    def forward_single(self, x, modality) -> torch.Tensor:
        """Class probabilities from one modality's backbone and head only."""
        if modality not in self.backbones:
            raise KeyError(f"unknown modality {modality!r}; have {self.modalities}")
        return self.heads[modality](self.backbones[modality](x))


class SingleModalityNet(nn.Module):
    """Independently trained one-modality baseline (backbone + head)."""

    def __init__(self, modality, backbone: BackboneConfig | None = None):
        super().__init__()
        self.modalities = (modality,)
        self.backbone_config = backbone or BackboneConfig()
        self.backbone = UNet3D(self.backbone_config)
        self.head = SegmentationHead(self.backbone_config.feature_channels)

    def forward_single(self, x, modality=None) -> torch.Tensor:
        if modality is not None and modality != self.modalities[0]:
            raise KeyError(f"baseline trained on {self.modalities[0]!r}, asked for {modality!r}")
        return self.head(self.backbone(x))
