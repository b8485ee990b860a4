"""Contrast-fusion front-end: per-contrast Inception blocks, concat, a
merging Inception block, and a 1x1x1 projection to one channel.

Two independently parameterized pipelines are used, one for the moving
study and one for the target study (see :mod:`fusereg.model`).
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .volume import MultiContrastStudy, Volume3D

CONTRAST_ORDER = ("t1ce", "t1", "flair", "t2")


@dataclass(frozen=True)
class InceptionConfig:
    """Branch widths of one dimension-reduced Inception block."""

    b1x1: int
    b3x3_reduce: int
    b3x3: int
    b5x5_reduce: int
    b5x5: int
    pool_proj: int

    def __post_init__(self) -> None:
        for name in ("b1x1", "b3x3_reduce", "b3x3", "b5x5_reduce", "b5x5", "pool_proj"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def out_channels(self) -> int:
        return self.b1x1 + self.b3x3 + self.b5x5 + self.pool_proj


# desk-scale defaults: 8-channel input blocks, 16-channel merge block
DEFAULT_INPUT_BLOCK = InceptionConfig(b1x1=2, b3x3_reduce=2, b3x3=4, b5x5_reduce=1, b5x5=1, pool_proj=1)
DEFAULT_MERGE_BLOCK = InceptionConfig(b1x1=4, b3x3_reduce=4, b3x3=8, b5x5_reduce=1, b5x5=2, pool_proj=2)


@dataclass(frozen=True)
class FusionConfig:
    input_block: InceptionConfig = DEFAULT_INPUT_BLOCK
    merge_block: InceptionConfig = DEFAULT_MERGE_BLOCK
    instance_norm: bool = False


def _conv(in_ch: int, out_ch: int, kernel: int, norm: bool) -> nn.Sequential:
    pad = kernel // 2
    layers: list[nn.Module] = [nn.Conv3d(in_ch, out_ch, kernel, padding=pad)]
    if norm:
        layers.append(nn.InstanceNorm3d(out_ch))
    layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class InceptionBlock3d(nn.Module):
    """Four parallel branches, channel-concatenated; spatial dims preserved."""

    def __init__(self, in_channels: int, config: InceptionConfig, instance_norm: bool = False):
        super().__init__()
        self.config = config
        self.branch1 = _conv(in_channels, config.b1x1, 1, instance_norm)
        self.branch3 = nn.Sequential(
            _conv(in_channels, config.b3x3_reduce, 1, instance_norm),
            _conv(config.b3x3_reduce, config.b3x3, 3, instance_norm),
        )
        self.branch5 = nn.Sequential(
            _conv(in_channels, config.b5x5_reduce, 1, instance_norm),
            _conv(config.b5x5_reduce, config.b5x5, 5, instance_norm),
        )
        self.branch_pool = nn.Sequential(
            nn.MaxPool3d(kernel_size=3, stride=1, padding=1),
            _conv(in_channels, config.pool_proj, 1, instance_norm),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.cat(
            [self.branch1(x), self.branch3(x), self.branch5(x), self.branch_pool(x)], dim=1
        )


class FusionPipeline(nn.Module):
    """One study's four contrasts -> a single-channel merged image.

    Input (B, 4, D, H, W) with channels ordered like ``CONTRAST_ORDER``;
    output (B, 1, D, H, W). The projection keeps a bias and no
    nonlinearity so fused intensities may be signed.
    """

    def __init__(self, config: FusionConfig = FusionConfig()):
        super().__init__()
        self.config = config
        norm = config.instance_norm
        self.block_t1ce = InceptionBlock3d(1, config.input_block, norm)
        self.block_t1 = InceptionBlock3d(1, config.input_block, norm)
        self.block_flair = InceptionBlock3d(1, config.input_block, norm)
        self.block_t2 = InceptionBlock3d(1, config.input_block, norm)
        self.merge = InceptionBlock3d(4 * config.input_block.out_channels, config.merge_block, norm)
        self.project = nn.Conv3d(config.merge_block.out_channels, 1, kernel_size=1, stride=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.ndim != 5 or x.shape[1] != 4:
            raise ValueError(f"expected (B, 4, D, H, W), got {tuple(x.shape)}")
        parts = [
            self.block_t1ce(x[:, 0:1]),
            self.block_t1(x[:, 1:2]),
            self.block_flair(x[:, 2:3]),
            self.block_t2(x[:, 3:4]),
        ]
        merged = self.merge(torch.cat(parts, dim=1))
        return self.project(merged)


def study_tensor(study: MultiContrastStudy, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Stack a study's contrasts into a (1, 4, D, H, W) tensor."""
    stack = torch.stack([torch.from_numpy(v.data) for v in study.contrasts()])
    return stack.to(dtype).unsqueeze(0)


def fuse_contrasts(study: MultiContrastStudy, pipeline: FusionPipeline) -> Volume3D:
    """Run the fusion pipeline on a study; returns the merged image."""
    with torch.no_grad():
        fused = pipeline(study_tensor(study))[0, 0]
    return Volume3D(fused.numpy(), study.spacing, study.origin)


def parameter_count(config: FusionConfig) -> int:
    """Learnable parameter count of one pipeline, from shapes alone."""

    def conv_params(cin: int, cout: int, k: int) -> int:
        return cout * cin * k**3 + cout

    def block_params(cin: int, cfg: InceptionConfig) -> int:
        return (
            conv_params(cin, cfg.b1x1, 1)
            + conv_params(cin, cfg.b3x3_reduce, 1)
            + conv_params(cfg.b3x3_reduce, cfg.b3x3, 3)
            + conv_params(cin, cfg.b5x5_reduce, 1)
            + conv_params(cfg.b5x5_reduce, cfg.b5x5, 5)
            + conv_params(cin, cfg.pool_proj, 1)
        )

    total = 4 * block_params(1, config.input_block)
    total += block_params(4 * config.input_block.out_channels, config.merge_block)
    total += conv_params(config.merge_block.out_channels, 1, 1)
    return total
