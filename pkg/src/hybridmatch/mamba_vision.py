"""MambaVision token mixer: an SSM branch and a convolution-only symmetric branch.

Both branches project the normalised input to half width and run a
non-causal depthwise 1-D convolution followed by SiLU; only the first branch
then goes through the selective scan.  The two halves are concatenated,
projected back to full width, and added to the input.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigurationError, DimensionError
from .numerics import Conv1d, LayerNorm, Linear, Module, Tensor, ops
from .ssm import SelectiveSsm

ROW_MAJOR = "row_major"
COLUMN_MAJOR = "column_major"


class MambaVisionLayer(Module):
    def __init__(self, dim: int, rng: np.random.Generator, d_state: int = 16, conv_kernel: int = 3,
                 scan_mode: str = ROW_MAJOR, direction: str = "uni"):
        super().__init__()
        if dim % 2:
            raise ConfigurationError(f"MambaVision width must be even, got {dim}")
        if scan_mode not in (ROW_MAJOR, COLUMN_MAJOR):
            raise ConfigurationError(f"unknown scan mode {scan_mode!r}")
        if direction not in ("uni", "bi"):
            raise ConfigurationError(f"unknown direction {direction!r}")
        half = dim // 2
        self.dim = dim
        self.scan_mode = scan_mode
        self.direction = direction
        self.norm = LayerNorm(dim)
        self.proj_in_x = Linear(dim, half, rng)
        self.proj_in_z = Linear(dim, half, rng)
        self.conv_x = Conv1d(half, half, conv_kernel, rng, groups=half)
        self.conv_z = Conv1d(half, half, conv_kernel, rng, groups=half)
        self.ssm = SelectiveSsm(half, rng, d_state=d_state)
        self.proj_out = Linear(dim, dim, rng)

    def _branch(self, u: Tensor, proj: Linear, conv: Conv1d) -> Tensor:
        v = ops.transpose(proj(u), (0, 2, 1))
        v = ops.transpose(conv(v), (0, 2, 1))
        return ops.silu(v)

    def core(self, u: Tensor) -> Tensor:
        """Pre-projection body on normalised tokens ``[B, L, C]`` -> ``[B, L, C]``."""
        x = self.ssm(self._branch(u, self.proj_in_x, self.conv_x))
        z = self._branch(u, self.proj_in_z, self.conv_z)
        return ops.concat([x, z], axis=-1)

    def mix_tokens(self, x_in: Tensor) -> Tensor:
        """Apply the block to a token sequence ``[L, C]`` or ``[B, L, C]``."""
        if x_in.shape[-1] != self.dim:
            raise DimensionError(f"expected width {self.dim}, got {x_in.shape[-1]}")
        unbatched = x_in.ndim == 2
        x = ops.reshape(x_in, (1,) + x_in.shape) if unbatched else x_in
        u = self.norm(x)
        if self.direction == "uni":
            mixed = self.core(u)
        else:
            fwd = self.core(u)
            bwd = ops.flip(self.core(ops.flip(u, 1)), 1)
            mixed = ops.add(fwd, bwd)
        y = ops.add(x, self.proj_out(mixed))
        return ops.reshape(y, x_in.shape) if unbatched else y

    def forward(self, x: Tensor) -> Tensor:
        """Apply to a token grid ``[H, W, C]`` / ``[B, H, W, C]`` in this layer's scan order."""
        unbatched = x.ndim == 3
        if x.ndim not in (3, 4):
            raise DimensionError(f"expected a token grid, got shape {x.shape}")
        g = ops.reshape(x, (1,) + x.shape) if unbatched else x
        if self.scan_mode == COLUMN_MAJOR:
            g = ops.transpose(g, (0, 2, 1, 3))
        b, h, w, c = g.shape
        y = ops.reshape(self.mix_tokens(ops.reshape(g, (b, h * w, c))), (b, h, w, c))
        if self.scan_mode == COLUMN_MAJOR:
            y = ops.transpose(y, (0, 2, 1, 3))
        return ops.reshape(y, x.shape) if unbatched else y


def mamba_vision_block(layer: MambaVisionLayer, x_in: Tensor) -> Tensor:
    """Row-major block on a token sequence ``[L, C]``."""
    return layer.mix_tokens(x_in)


def mamba_vision_s(layer: MambaVisionLayer, x: Tensor) -> Tensor:
    """Column-major scan: transpose the grid, apply the block, transpose back."""
    if x.ndim != 3:
        raise DimensionError(f"mamba_vision_s expects an [H, W, C] grid, got {x.shape}")
    t = ops.transpose(x, (1, 0, 2))
    h, w, c = t.shape
    y = ops.reshape(layer.mix_tokens(ops.reshape(t, (h * w, c))), (h, w, c))
    return ops.transpose(y, (1, 0, 2))


def mamba_vision_bi(layer: MambaVisionLayer, x_in: Tensor) -> Tensor:
    if layer.direction != "bi":
        raise ConfigurationError("mamba_vision_bi needs a layer built with direction='bi'")
    return layer.mix_tokens(x_in)
