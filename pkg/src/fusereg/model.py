"""The two-stage cascade: separate fusion pipelines for the moving and
target studies feeding the displacement backbone, plus seeded
initialization shared by every trainable module."""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .backbone import BackboneConfig, DisplacementBackbone
from .fusion import FusionConfig, FusionPipeline


def init_parameters(module: nn.Module, seed: int) -> None:
    """Deterministic fan-in-scaled uniform init.

    Conv/linear weights are U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases
    zero, norm layers identity, window-attention bias tables small
    uniform. Any submodule named ``flow_head`` is zeroed afterwards so
    the initial displacement prediction is the zero field.
    """
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for m in module.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = 1.0 / math.sqrt(fan_in)
                m.weight.uniform_(-bound, bound, generator=gen)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, nn.LayerNorm):
                m.weight.fill_(1.0)
                m.bias.zero_()
        for name, p in module.named_parameters():
            if name.endswith("relative_position_bias_table"):
                p.uniform_(-0.02, 0.02, generator=gen)
        for name, m in module.named_modules():
            if name.split(".")[-1] == "flow_head":
                m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()


class RegistrationCascade(nn.Module):
    """Fusion (moving + target pipelines with disjoint parameters)
    followed by the displacement backbone."""

    def __init__(
        self,
        fusion_config: FusionConfig = FusionConfig(),
        backbone_config: BackboneConfig = BackboneConfig(),
    ):
        super().__init__()
        self.fusion_moving = FusionPipeline(fusion_config)
        self.fusion_fixed = FusionPipeline(fusion_config)
        self.backbone = DisplacementBackbone(backbone_config)

    def forward(
        self, moving: torch.Tensor, fixed: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """(B,4,D,H,W) studies -> (field, fused_moving, fused_fixed)."""
        fused_m = self.fusion_moving(moving)
        fused_f = self.fusion_fixed(fixed)
        field = self.backbone(fused_m, fused_f)
        return field, fused_m, fused_f


def build_cascade(
    fusion_config: FusionConfig, backbone_config: BackboneConfig, seed: int
) -> RegistrationCascade:
    model = RegistrationCascade(fusion_config, backbone_config)
    init_parameters(model, seed)
    return model
