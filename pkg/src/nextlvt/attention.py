"""The three attention mechanisms used by the blocks.

`SelfAttention` covers both vanilla scaled dot-product attention and its
cost-reduced variant: when `pool_stride > 1` the projected keys and values
are average-pooled on their 2-D token grid before the attention product,
shrinking the key/value sequence by `pool_stride**2` while queries and the
output keep the full token count. `pool_stride=1` takes the identical
arithmetic path as vanilla attention.

`MultiHeadConvAttention` is the convolutional counterpart: channels are
split into heads, each head mixes a local neighborhood through a grouped
square convolution (one group per head), and a pointwise projection blends
the heads back together.
"""

from __future__ import annotations

import math

import numpy as np

from . import costs
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, Linear, avg_pool2d
from .module import Module
from .tensor import ACTIVATIONS, Tensor, reshape, softmax, transpose


def grid_to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C), row-major over the spatial grid."""
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))


def tokens_to_grid(t: Tensor, h: int, w: int) -> Tensor:
    """(B, H*W, C) -> (B, C, H, W); exact inverse of `grid_to_tokens`."""
    b, n, c = t.shape
    if n != h * w:
        raise ShapeError(f"token count {n} does not match grid {h}x{w}")
    return reshape(transpose(t, (0, 2, 1)), (b, c, h, w))


class SelfAttention(Module):
    """Multi-head self-attention over a token sequence.

    Per head, queries/keys/values are linear projections of the full input
    (head h owns columns [h*D_h, (h+1)*D_h) of the combined projections),
    attention logits are scaled by sqrt(D_h), and head outputs are
    concatenated and mixed by an output projection.
    """

    def __init__(self, dim: int, heads: int, *, pool_stride: int = 1,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"attention dim {dim} not divisible by heads {heads}")
        if pool_stride < 1:
            raise ConfigError(f"pool_stride must be >= 1, got {pool_stride}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.pool_stride = pool_stride
        self.proj_q = Linear(dim, dim, rng=rng, dtype=dtype)
        self.proj_k = Linear(dim, dim, rng=rng, dtype=dtype)
        self.proj_v = Linear(dim, dim, rng=rng, dtype=dtype)
        self.proj_out = Linear(dim, dim, rng=rng, dtype=dtype)

    def _split_heads(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return transpose(reshape(t, (b, n, self.heads, self.head_dim)), (0, 2, 1, 3))

    def _pool_tokens(self, t: Tensor, grid_hw: tuple[int, int]) -> Tensor:
        h, w = grid_hw
        s = self.pool_stride
        if h % s or w % s:
            raise ConfigError(
                f"pool_stride {s} does not divide the token grid {h}x{w}"
            )
        pooled = avg_pool2d(tokens_to_grid(t, h, w), s)
        return grid_to_tokens(pooled)

    def forward(self, x: Tensor, grid_hw: tuple[int, int] | None = None) -> Tensor:
        if x.ndim != 3 or x.shape[-1] != self.dim:
            raise ShapeError(
                f"attention expects (B, N, {self.dim}) tokens, got {x.shape}"
            )
        b, n, _ = x.shape
        q = self.proj_q(x)
        k = self.proj_k(x)
        v = self.proj_v(x)
        if self.pool_stride > 1:
            if grid_hw is None:
                raise ShapeError("pooled attention needs the token grid shape")
            if grid_hw[0] * grid_hw[1] != n:
                raise ShapeError(
                    f"token count {n} does not match grid {grid_hw}"
                )
            k = self._pool_tokens(k, grid_hw)
            v = self._pool_tokens(v, grid_hw)
        q = self._split_heads(q)
        k = self._split_heads(k)
        v = self._split_heads(v)
        with costs.scope("scores"):
            logits = (q @ transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        weights = softmax(logits, axis=-1)
        with costs.scope("mix"):
            mixed = weights @ v
        merged = reshape(transpose(mixed, (0, 2, 1, 3)), (b, n, self.dim))
        return self.proj_out(merged)


class MultiHeadConvAttention(Module):
    """Convolutional attention over a (B, C, H, W) feature map.

    Channels split into `heads` groups; each group runs a same-padding
    square convolution (the learnable neighborhood mixer), optionally
    normalized and activated, and a pointwise projection mixes the heads.
    Shape is preserved.
    """

    def __init__(self, channels: int, heads: int, *, kernel_size: int = 3,
                 norm: bool = True, activation: str = "relu",
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if channels % heads:
            raise ConfigError(
                f"channels {channels} not divisible by heads {heads}"
            )
        if kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel_size}")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {activation!r}")
        self.channels = channels
        self.heads = heads
        self.mixer = Conv2d(channels, channels, kernel_size,
                            padding=kernel_size // 2, groups=heads, bias=False,
                            rng=rng, dtype=dtype)
        self.norm = BatchNorm2d(channels, dtype=dtype) if norm else None
        self.activation = ACTIVATIONS[activation]
        self.proj = Conv2d(channels, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(
                f"expected (B, {self.channels}, H, W) input, got {x.shape}"
            )
        y = self.mixer(x)
        if self.norm is not None:
            y = self.norm(y)
        y = self.activation(y)
        return self.proj(y)
