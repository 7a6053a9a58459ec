"""
Building blocks of the encoder and decoder: inverted residual, patch
unfold/fold, interpatch self-attention, the local-global block and the
upsample-and-concatenate decoder step.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigurationError
from .layers import ConvBNAct, ConvTranspose2d, Conv2d, LayerNorm, Linear, Module
from .tensor import Tensor


class InvertedResidual(Module):
    """pointwise expand -> depthwise 3x3 -> pointwise project, skip when shape-preserving."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        stride: int = 1,
        expansion: int = 2,
        residual: Optional[bool] = None,
        dtype=np.float64,
    ):
        super().__init__()
        if stride not in (1, 2):
            raise ConfigurationError(f"inverted residual stride must be 1 or 2, got {stride}")
        shape_preserving = stride == 1 and in_channels == out_channels
        if residual and not shape_preserving:
            raise ConfigurationError(
                f"residual requested for a block that changes shape "
                f"(stride={stride}, {in_channels}->{out_channels} channels)"
            )
        self.residual = shape_preserving if residual is None else residual
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride
        hidden = in_channels * expansion
        self.expand = ConvBNAct(in_channels, hidden, 1, rng, dtype=dtype)
        self.depthwise = ConvBNAct(hidden, hidden, 3, rng, stride=stride, groups=hidden, dtype=dtype)
        self.project = ConvBNAct(hidden, out_channels, 1, rng, act=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(f"inverted residual expects {self.in_channels} channels, got input {x.shape}")
        y = self.project(self.depthwise(self.expand(x)))
        return x + y if self.residual else y


@dataclass
class PatchGrid:
    """
    Feature map rearranged into patches.

    data has shape (B, P, N, d): P = patch_w * patch_h positions inside a
    patch, N = (H * W) / P patches.
    """
    data: Tensor
    patch_w: int
    patch_h: int
    origin_h: int
    origin_w: int

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ConfigurationError(f"patch grid data must be (B, P, N, d), got {self.data.shape}")
        _, P, N, _ = self.data.shape
        if self.origin_h % self.patch_h or self.origin_w % self.patch_w:
            raise ConfigurationError(
                f"origin {self.origin_h}x{self.origin_w} not divisible by patch {self.patch_h}x{self.patch_w}"
            )
        if P != self.patch_w * self.patch_h or N * P != self.origin_h * self.origin_w:
            raise ConfigurationError(
                f"patch grid {self.data.shape} inconsistent with origin {self.origin_h}x{self.origin_w} "
                f"and patch {self.patch_h}x{self.patch_w}"
            )

    @property
    def P(self) -> int:
        return self.patch_w * self.patch_h

    @property
    def N(self) -> int:
        return (self.origin_h * self.origin_w) // self.P

    def with_data(self, data: Tensor) -> "PatchGrid":
        return PatchGrid(data, self.patch_w, self.patch_h, self.origin_h, self.origin_w)


def unfold(x: Tensor, patch_w: int, patch_h: int) -> PatchGrid:
    """
    Split (B, d, H, W) into patches.

    Position p = i * patch_w + j of patch n = a * (W / patch_w) + b holds the
    pixel at row a * patch_h + i, column b * patch_w + j.
    """
    B, C, H, W = x.shape
    if H % patch_h or W % patch_w:
        raise ConfigurationError(
            f"feature map {H}x{W} not divisible by patch {patch_h}x{patch_w}: "
            f"pad height by {(-H) % patch_h} and width by {(-W) % patch_w}"
        )
    nh, nw = H // patch_h, W // patch_w
    y = x.reshape(B, C, nh, patch_h, nw, patch_w)
    y = y.transpose(0, 3, 5, 2, 4, 1)
    y = y.reshape(B, patch_h * patch_w, nh * nw, C)
    return PatchGrid(y, patch_w, patch_h, H, W)


def fold(grid: PatchGrid) -> Tensor:
    """Exact inverse of unfold."""
    B, P, N, C = grid.data.shape
    ph, pw = grid.patch_h, grid.patch_w
    if grid.origin_h % ph or grid.origin_w % pw or N * P != grid.origin_h * grid.origin_w:
        raise ConfigurationError(
            f"cannot fold {grid.data.shape} into {grid.origin_h}x{grid.origin_w} with patch {ph}x{pw}"
        )
    nh, nw = grid.origin_h // ph, grid.origin_w // pw
    y = grid.data.reshape(B, ph, pw, nh, nw, C)
    y = y.transpose(0, 5, 3, 1, 4, 2)
    return y.reshape(B, C, grid.origin_h, grid.origin_w)


class InterpatchAttention(Module):
    """Multi-head attention across the N patches at each intra-patch position."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if heads < 1 or dim % heads:
            raise ConfigurationError(f"attention dim {dim} not divisible by heads={heads}")
        self.dim = dim
        self.heads = heads
        self.q = Linear(dim, dim, rng, dtype=dtype)
        self.k = Linear(dim, dim, rng, dtype=dtype)
        self.v = Linear(dim, dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)

    def _split(self, t: Tensor) -> Tensor:
        B, P, N, _ = t.shape
        return t.reshape(B, P, N, self.heads, self.dim // self.heads).transpose(0, 1, 3, 2, 4)

    def forward(self, grid: PatchGrid, return_weights: bool = False):
        x = grid.data
        if x.shape[-1] != self.dim:
            raise ConfigurationError(f"attention expects token dim {self.dim}, got {x.shape}")
        B, P, N, _ = x.shape
        q, k, v = self._split(self.q(x)), self._split(self.k(x)), self._split(self.v(x))
        scale = 1.0 / np.sqrt(self.dim // self.heads)
        weights = ops.softmax((q @ k.transpose(0, 1, 2, 4, 3)) * scale, axis=-1)
        out = (weights @ v).transpose(0, 1, 3, 2, 4).reshape(B, P, N, self.dim)
        result = grid.with_data(self.proj(out))
        return (result, weights.data) if return_weights else result


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.silu(self.fc1(x)))


class TransformerLayer(Module):
    """Pre-norm attention and feed-forward, each with a residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = InterpatchAttention(dim, heads, rng, dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.ffn = FeedForward(dim, max(1, int(dim * mlp_ratio)), rng, dtype=dtype)

    def forward(self, grid: PatchGrid) -> PatchGrid:
        x = grid.data
        x = x + self.attn(grid.with_data(self.norm1(x))).data
        x = x + self.ffn(self.norm2(x))
        return grid.with_data(x)


class MobileViTBlock(Module):
    """
    Local-global block: 3x3 conv and pointwise projection for local features,
    transformer layers over unfolded patches for global context, then fold,
    project back, concatenate with the input and fuse with a 3x3 conv.
    """

    def __init__(
        self,
        channels: int,
        rng: np.random.Generator,
        transformer_dim: Optional[int] = None,
        heads: int = 2,
        depth: int = 1,
        mlp_ratio: float = 2.0,
        patch_size: Tuple[int, int] = (2, 2),
        dtype=np.float64,
    ):
        super().__init__()
        dim = transformer_dim or channels
        self.patch_w, self.patch_h = patch_size
        self.local = ConvBNAct(channels, channels, 3, rng, dtype=dtype)
        self.to_tokens = Conv2d(channels, dim, 1, rng, bias=False, dtype=dtype)
        self.layers = [TransformerLayer(dim, heads, mlp_ratio, rng, dtype=dtype) for _ in range(depth)]
        for i, layer in enumerate(self.layers):
            setattr(self, f"transformer{i}", layer)
        self.from_tokens = ConvBNAct(dim, channels, 1, rng, dtype=dtype)
        self.fusion = ConvBNAct(2 * channels, channels, 3, rng, dtype=dtype)

    def zero_init_global_branch(self) -> None:
        """Zero the attention and feed-forward output projections (pure-convolution ablation)."""
        for layer in self.layers:
            for lin in (layer.attn.proj, layer.ffn.fc2):
                lin.weight.data[...] = 0.0
                lin.bias.data[...] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        y = self.to_tokens(self.local(x))
        grid = unfold(y, self.patch_w, self.patch_h)
        for layer in self.layers:
            grid = layer(grid)
        y = self.from_tokens(fold(grid))
        return self.fusion(ops.concat([x, y], axis=1))


class UpsampleConcat(Module):
    """
    2x transpose-conv upsampling, concatenation with the skip, pointwise fusion.
    With upsample=False (stride-1 encoder stage) the decoder features are
    concatenated as they are.
    """

    def __init__(
        self,
        dec_channels: int,
        skip_channels: int,
        out_channels: int,
        rng: np.random.Generator,
        upsample: bool = True,
        dtype=np.float64,
    ):
        super().__init__()
        self.out_channels = out_channels
        self.up = ConvTranspose2d(dec_channels, dec_channels, rng, kernel_size=2, stride=2, dtype=dtype) if upsample else None
        self.fuse = ConvBNAct(dec_channels + skip_channels, out_channels, 1, rng, dtype=dtype)

    def forward(self, x_dec: Tensor, x_skip: Tensor) -> Tensor:
        up = self.up(x_dec) if self.up is not None else x_dec
        if up.shape[0] != x_skip.shape[0] or up.shape[2:] != x_skip.shape[2:]:
            raise ConfigurationError(
                f"upsampled decoder features {up.shape} do not match skip {x_skip.shape}"
            )
        return self.fuse(ops.concat([up, x_skip], axis=1))
