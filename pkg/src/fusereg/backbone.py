"""Displacement-field backbone: windowed-attention (or plain conv)
encoder, convolutional decoder with long skip connections, zero-started
flow head.

Input is the 2-channel concatenation of the fused moving and fused
fixed images; output is a dense (3, D, H, W) displacement field at the
full input resolution. Inputs whose dims are not multiples of the
config's internal stride are replicate-padded and the field is cropped
back.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .swin import SwinEncoder3d
from .volume import DisplacementField, Volume3D

VARIANTS = ("swin", "conv-fallback")


@dataclass(frozen=True)
class BackboneConfig:
    embed_dim: int = 16
    depths: tuple[int, ...] = (2, 2)
    heads: tuple[int, ...] = (2, 4)
    window: tuple[int, int, int] = (4, 4, 4)
    patch_size: int = 2
    decoder_channels: tuple[int, ...] = (32, 16, 16)
    variant: str = "swin"

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if len(self.depths) != len(self.heads):
            raise ValueError("depths and heads lists must have the same length")
        if len(self.decoder_channels) < len(self.depths):
            raise ValueError("need at least one decoder channel width per stage")
        if self.patch_size < 1 or self.embed_dim < 1:
            raise ValueError("patch_size and embed_dim must be positive")
        for i, h in enumerate(self.heads):
            if (self.embed_dim * 2**i) % h:
                raise ValueError(f"stage {i} dim {self.embed_dim * 2**i} not divisible by {h} heads")

    @property
    def num_stages(self) -> int:
        return len(self.depths)

    def required_multiple(self) -> tuple[int, int, int]:
        """Input dims are padded up to multiples of this (per axis)."""
        base = self.patch_size * 2 ** (self.num_stages - 1)
        if self.variant == "swin":
            return tuple(base * w for w in self.window)  # type: ignore[return-value]
        return (base, base, base)


class ConvEncoder3d(nn.Module):
    """Plain conv encoder with the same resolution/channel schedule as
    the attention encoder; used for fast gradient-check oracles."""

    def __init__(self, in_channels: int, embed_dim: int, depths: Sequence[int], patch_size: int):
        super().__init__()
        self.patch_embed = nn.Conv3d(in_channels, embed_dim, patch_size, stride=patch_size)
        self.stages = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i, depth in enumerate(depths):
            dim = embed_dim * 2**i
            self.stages.append(
                nn.Sequential(
                    *[
                        layer
                        for _ in range(depth)
                        for layer in (nn.Conv3d(dim, dim, 3, padding=1), nn.LeakyReLU(0.2))
                    ]
                )
            )
            if i + 1 < len(depths):
                self.downs.append(nn.Conv3d(dim, dim * 2, 2, stride=2))

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = self.patch_embed(x)
        features = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            features.append(x)
            if i < len(self.downs):
                x = self.downs[i](x)
        return features


class DisplacementBackbone(nn.Module):
    """Fused moving + fused fixed -> dense displacement field."""

    def __init__(self, config: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.config = config
        in_channels = 2
        if config.variant == "swin":
            self.encoder = SwinEncoder3d(
                in_channels, config.embed_dim, config.depths, config.heads,
                config.window, config.patch_size,
            )
        else:
            self.encoder = ConvEncoder3d(
                in_channels, config.embed_dim, config.depths, config.patch_size
            )

        stage_dims = [config.embed_dim * 2**i for i in range(config.num_stages)]
        dec = config.decoder_channels
        self.up_convs = nn.ModuleList()
        prev = stage_dims[-1]
        # one up+skip step per encoder stage; the last skip is the raw input
        skip_dims = list(reversed(stage_dims[:-1])) + [in_channels]
        for i, skip in enumerate(skip_dims):
            self.up_convs.append(nn.Conv3d(prev + skip, dec[i], 3, padding=1))
            prev = dec[i]
        self.refine = nn.ModuleList(
            nn.Conv3d(prev if j == 0 else dec[len(skip_dims) + j - 1], ch, 3, padding=1)
            for j, ch in enumerate(dec[len(skip_dims):])
        )
        if self.refine:
            prev = dec[-1]
        self.act = nn.LeakyReLU(0.2)
        self.flow_head = nn.Conv3d(prev, 3, 3, padding=1)
        # registration starts from the identity map
        nn.init.zeros_(self.flow_head.weight)
        nn.init.zeros_(self.flow_head.bias)

    def forward(self, fused_moving: torch.Tensor, fused_fixed: torch.Tensor) -> torch.Tensor:
        if fused_moving.shape != fused_fixed.shape:
            raise ValueError(
                f"moving/fixed shape mismatch: {tuple(fused_moving.shape)} vs {tuple(fused_fixed.shape)}"
            )
        if fused_moving.ndim != 5 or fused_moving.shape[1] != 1:
            raise ValueError(f"expected (B, 1, D, H, W), got {tuple(fused_moving.shape)}")
        spatial = fused_moving.shape[2:]
        mult = self.config.required_multiple()
        for axis, (size, m) in enumerate(zip(spatial, mult)):
            if size < self.config.patch_size:
                raise ValueError(f"spatial dim {axis} ({size}) smaller than patch size")

        x = torch.cat([fused_moving, fused_fixed], dim=1)
        pad = [(-size) % m for size, m in zip(spatial, mult)]
        if any(pad):
            x = F.pad(x, (0, pad[2], 0, pad[1], 0, pad[0]), mode="replicate")

        features = self.encoder(x)
        d = features[-1]
        skips = list(reversed(features[:-1])) + [x]
        for conv, skip in zip(self.up_convs, skips):
            d = F.interpolate(d, size=skip.shape[2:], mode="trilinear", align_corners=False)
            if d.shape[2:] != skip.shape[2:]:
                raise ValueError("decoder/skip resolution mismatch")
            d = self.act(conv(torch.cat([d, skip], dim=1)))
        for conv in self.refine:
            d = self.act(conv(d))
        flow = self.flow_head(d)
        if any(pad):
            flow = flow[:, :, : spatial[0], : spatial[1], : spatial[2]]
        return flow


def init_params(config: BackboneConfig, seed: int) -> dict[str, torch.Tensor]:
    """Deterministic seeded parameters; the flow head is zeroed so a
    fresh backbone predicts the zero field."""
    from .model import init_parameters  # local import to avoid a cycle

    module = DisplacementBackbone(config)
    init_parameters(module, seed)
    return {name: p.detach().clone() for name, p in module.named_parameters()}


def load_params(module: nn.Module, params: dict[str, torch.Tensor]) -> None:
    own = dict(module.named_parameters())
    missing = sorted(set(own) - set(params))
    unexpected = sorted(set(params) - set(own))
    if missing or unexpected:
        raise ValueError(f"parameter name mismatch; missing={missing}, unexpected={unexpected}")
    with torch.no_grad():
        for name, p in own.items():
            p.copy_(params[name].to(p.dtype))


def predict_displacement(
    fused_moving: Volume3D,
    fused_fixed: Volume3D,
    params: dict[str, torch.Tensor],
    config: BackboneConfig,
) -> DisplacementField:
    """Run the backbone on fused volumes; deterministic given inputs/params."""
    if fused_moving.shape != fused_fixed.shape:
        raise ValueError(f"shape mismatch: {fused_moving.shape} vs {fused_fixed.shape}")
    module = DisplacementBackbone(config)
    load_params(module, params)
    module.eval()
    with torch.no_grad():
        m = torch.from_numpy(fused_moving.data)[None, None]
        f = torch.from_numpy(fused_fixed.data)[None, None]
        flow = module(m, f)[0]
    return DisplacementField(flow.numpy())
