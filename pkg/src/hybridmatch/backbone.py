"""VGG-style feature extractor producing maps at strides 2, 4 and 8."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractError
from .numerics import BatchNorm2d, Conv2d, Module, ModuleList, Tensor, ops, parameter


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple[int, int, int] = (32, 64, 128)
    blocks_per_group: int = 3
    in_channels: int = 1

    def __post_init__(self):
        if len(self.channels) != 3:
            raise ConfigurationError("the backbone has exactly three groups")
        if self.blocks_per_group < 1:
            raise ConfigurationError("each group needs at least one block")


@dataclass
class FeatureMaps:
    f2: Tensor
    f4: Tensor
    f8: Tensor


class ConvBnRelu(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, 3, rng, stride=stride, pad=1, bias=False)
        self.bn = BatchNorm2d(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.bn(self.conv(x)))


class FusedConvRelu(Module):
    def __init__(self, conv: Conv2d):
        super().__init__()
        self.conv = conv

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.conv(x))


def fuse_conv_bn(conv: Conv2d, bn: BatchNorm2d) -> Conv2d:
    """Fold frozen batch-norm statistics into a convolution's weight and bias."""
    if bn.training:
        raise ContractError("fuse_conv_bn needs a batch norm in inference mode")
    scale = bn.weight.data / np.sqrt(bn.running_var + bn.eps)
    bias = conv.bias.data if conv.bias is not None else np.zeros_like(bn.running_mean)
    fused = Conv2d.__new__(Conv2d)
    Module.__init__(fused)
    fused.stride = conv.stride
    fused.pad = conv.pad
    fused.weight = parameter(conv.weight.data * scale[:, None, None, None], dtype=conv.weight.dtype)
    fused.bias = parameter((bias - bn.running_mean) * scale + bn.bias.data, dtype=conv.weight.dtype)
    return fused


class Backbone(Module):
    """Three groups of Conv-BN-ReLU blocks; the first block of each group has stride 2."""

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.groups = ModuleList()
        c_in = cfg.in_channels
        for c_out in cfg.channels:
            blocks = ModuleList()
            for b in range(cfg.blocks_per_group):
                blocks.append(ConvBnRelu(c_in, c_out, 2 if b == 0 else 1, rng))
                c_in = c_out
            self.groups.append(blocks)

    def forward(self, image: Tensor) -> FeatureMaps:
        """``image`` is ``[1, H, W]`` or ``[B, 1, H, W]`` with ``H, W`` multiples of 8."""
        h, w = image.shape[-2:]
        if h % 8 or w % 8:
            raise ContractError(f"image extent {h}x{w} is not a multiple of 8; pad it first")
        x = image
        outs = []
        for group in self.groups:
            for block in group:
                x = block(x)
            outs.append(x)
        return FeatureMaps(*outs)

    def fused(self) -> "Backbone":
        """Inference copy with every Conv-BN pair folded into one convolution."""
        if self.training:
            raise ContractError("switch the backbone to eval() before fusing")
        out = Backbone.__new__(Backbone)
        Module.__init__(out)
        out.cfg = self.cfg
        out.groups = ModuleList()
        for group in self.groups:
            out.groups.append(ModuleList(FusedConvRelu(fuse_conv_bn(b.conv, b.bn)) for b in group))
        return out.eval()


def extract(backbone: Backbone, image: Tensor) -> FeatureMaps:
    return backbone(image)


def backbone_param_count(cfg: BackboneConfig) -> int:
    """Closed-form parameter count: 3x3 kernels plus (gamma, beta) per channel."""
    total, c_in = 0, cfg.in_channels
    for c_out in cfg.channels:
        for _ in range(cfg.blocks_per_group):
            total += 9 * c_in * c_out + 2 * c_out
            c_in = c_out
    return total
