"""Composite network blocks and the whole-model assembler.

The model is a pyramid of stages. Each stage repeats the pattern
"`ncb_count` convolution blocks, then exactly one transformer block", and
only the earliest transformer block in the whole network swaps its
feed-forward tail for the locality module (an inverted-residual
convolutional feed-forward); every later one keeps the plain MLP tail.
A stride-patch convolution stem turns the image into the first token grid
and a pooled-classifier head maps the last grid to class logits.
"""

from __future__ import annotations

import numpy as np

from .attention import (
    MultiHeadConvAttention,
    SelfAttention,
    grid_to_tokens,
    tokens_to_grid,
)
from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, Conv2d, LayerNorm, Linear
from .module import Module, ModuleList
from .tensor import ACTIVATIONS, Tensor, concat, tmean


class PatchEmbed(Module):
    """Non-overlapping patch embedding via a stride-`patch` convolution."""

    def __init__(self, in_channels: int, dim: int, patch: int, *,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.patch = patch
        self.dim = dim
        self.proj = Conv2d(in_channels, dim, patch, stride=patch, rng=rng, dtype=dtype)

    def forward(self, img: Tensor) -> Tensor:
        b, c, h, w = img.shape
        if h % self.patch or w % self.patch:
            raise ConfigError(
                f"patch size {self.patch} does not divide image {h}x{w}"
            )
        return self.proj(img)

    def tokens(self, img: Tensor) -> Tensor:
        """Embed and flatten: (B, C, H, W) -> (B, H*W/P^2, dim)."""
        return grid_to_tokens(self(img))


def token_count(h: int, w: int, patch: int) -> int:
    """Number of non-overlapping patch tokens for an H x W image."""
    if h % patch or w % patch:
        raise ConfigError(f"patch size {patch} does not divide image {h}x{w}")
    return (h * w) // (patch * patch)


def token_dim(channels: int, patch: int) -> int:
    """Raw dimensionality of one flattened patch."""
    return channels * patch * patch


class ConvMLP(Module):
    """Per-position feed-forward: norm, expand pointwise, GELU, project back."""

    def __init__(self, channels: int, ratio: int, *, rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        hidden = channels * ratio
        self.norm = BatchNorm2d(channels, dtype=dtype)
        self.expand = Conv2d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.project = Conv2d(hidden, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm(x)
        y = ACTIVATIONS["gelu"](self.expand(y))
        return self.project(y)


class LocalFeedForward(Module):
    """Inverted-residual feed-forward: pointwise expand, depthwise mix,
    activation, pointwise project. The residual is added by the caller."""

    def __init__(self, channels: int, ratio: int, *, kernel_size: int = 3,
                 activation: str = "gelu", rng: np.random.Generator,
                 dtype=np.float64):
        super().__init__()
        hidden = channels * ratio
        self.expand = Conv2d(channels, hidden, 1, rng=rng, dtype=dtype)
        self.depthwise = Conv2d(hidden, hidden, kernel_size,
                                padding=kernel_size // 2, groups=hidden,
                                rng=rng, dtype=dtype)
        self.activation = ACTIVATIONS[activation]
        self.project = Conv2d(hidden, channels, 1, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        y = self.depthwise(self.expand(x))
        return self.project(self.activation(y))


class ConvBlock(Module):
    """Residual local-feature block: convolutional attention then MLP,
    each with an identity shortcut. Shape-preserving."""

    kind = "NCB"

    def __init__(self, channels: int, heads: int, mlp_ratio: int, *,
                 ca_kernel: int = 3, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.mhca = MultiHeadConvAttention(channels, heads, kernel_size=ca_kernel,
                                           rng=rng, dtype=dtype)
        self.mlp = ConvMLP(channels, mlp_ratio, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.mhca(x)
        return x + self.mlp(x)


class TransformerBlock(Module):
    """Residual multi-path block mixing pooled global attention with local
    convolutional attention.

    The input is projected down to the attention path width, runs pooled
    self-attention with a shortcut (pre-norm layer normalization on the
    tokens), is bridged to the remaining channels for convolutional
    attention with a shortcut, and the two paths are concatenated back to
    the full width before the feed-forward tail (locality module on the
    network's first transformer block, MLP on the rest). Shape-preserving.
    """

    kind = "NTB"

    def __init__(self, channels: int, heads: int, *, shrink_ratio: float,
                 pool_stride: int, mlp_ratio: int, use_lff: bool,
                 ca_kernel: int = 3, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        attn_ch = int(shrink_ratio * channels)
        local_ch = channels - attn_ch
        if attn_ch < 1 or local_ch < 1:
            raise ConfigError(
                f"shrink_ratio {shrink_ratio} leaves an empty path for {channels} channels"
            )
        self.channels = channels
        self.attn_ch = attn_ch
        self.local_ch = local_ch
        self.use_lff = use_lff
        self.reduce = Conv2d(channels, attn_ch, 1, rng=rng, dtype=dtype)
        self.attn_norm = LayerNorm(attn_ch, dtype=dtype)
        self.attn = SelfAttention(attn_ch, heads, pool_stride=pool_stride,
                                  rng=rng, dtype=dtype)
        self.bridge = Conv2d(attn_ch, local_ch, 1, rng=rng, dtype=dtype)
        self.local = MultiHeadConvAttention(local_ch, heads, kernel_size=ca_kernel,
                                            rng=rng, dtype=dtype)
        if use_lff:
            self.tail = LocalFeedForward(channels, mlp_ratio, rng=rng, dtype=dtype)
        else:
            self.tail = ConvMLP(channels, mlp_ratio, rng=rng, dtype=dtype)

    def forward(self, x: Tensor, trace: dict[str, Tensor] | None = None) -> Tensor:
        b, c, h, w = x.shape
        if c != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {c}")
        reduced = self.reduce(x)
        tokens = grid_to_tokens(reduced)
        tokens = tokens + self.attn(self.attn_norm(tokens), (h, w))
        attn_out = tokens_to_grid(tokens, h, w)
        bridged = self.bridge(attn_out)
        local_out = bridged + self.local(bridged)
        merged = concat([attn_out, local_out], axis=1)
        out = merged + self.tail(merged)
        if trace is not None:
            trace.update(reduced=reduced, attn_out=attn_out, bridged=bridged,
                         local_out=local_out, merged=merged, out=out)
        return out


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x


class Transition(Module):
    """Stage adapter: pointwise width change, then a depthwise mix that is
    a non-overlapping 2x2 stride-2 convolution when downsampling (grid side
    must be even) or a same-padding 3x3 when only the width changes."""

    def __init__(self, in_channels: int, out_channels: int, *, downsample: bool,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.pointwise = Conv2d(in_channels, out_channels, 1, rng=rng, dtype=dtype)
        if downsample:
            self.depthwise = Conv2d(out_channels, out_channels, 2, stride=2,
                                    groups=out_channels, rng=rng, dtype=dtype)
        else:
            self.depthwise = Conv2d(out_channels, out_channels, 3, padding=1,
                                    groups=out_channels, rng=rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.depthwise(self.pointwise(x))


class Stage(Module):
    def __init__(self, blocks: ModuleList):
        super().__init__()
        self.blocks = blocks

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Model(Module):
    """Full classifier: patch stem, staged block pyramid, pooled linear head."""

    def __init__(self, cfg: ModelConfig, *, rng: np.random.Generator):
        super().__init__()
        cfg.validate()
        dtype = cfg.dtype
        self.config = cfg
        self.stem = PatchEmbed(cfg.in_channels, cfg.widths[0], cfg.patch_size,
                               rng=rng, dtype=dtype)
        transitions = ModuleList()
        stages = ModuleList()
        lff_assigned = False
        prev_width = cfg.widths[0]
        for i, spec in enumerate(cfg.stages):
            width = cfg.widths[i]
            if spec.downsample or width != prev_width:
                transitions.append(Transition(prev_width, width,
                                              downsample=spec.downsample,
                                              rng=rng, dtype=dtype))
            else:
                transitions.append(Identity())
            blocks = ModuleList()
            for _ in range(spec.repeats):
                for _ in range(spec.ncb_count):
                    blocks.append(ConvBlock(width, cfg.heads[i], cfg.mlp_ratio,
                                            ca_kernel=cfg.ca_kernel, rng=rng,
                                            dtype=dtype))
                blocks.append(TransformerBlock(
                    width, cfg.heads[i], shrink_ratio=cfg.shrink_ratio,
                    pool_stride=cfg.pool_strides[i], mlp_ratio=cfg.mlp_ratio,
                    use_lff=not lff_assigned, ca_kernel=cfg.ca_kernel,
                    rng=rng, dtype=dtype))
                lff_assigned = True
            stages.append(Stage(blocks))
            prev_width = width
        self.transitions = transitions
        self.stages = stages
        self.head = Linear(cfg.widths[-1], cfg.num_classes, rng=rng, dtype=dtype)

    def forward(self, img: Tensor) -> Tensor:
        cfg = self.config
        if img.ndim != 4 or img.shape[1] != cfg.in_channels:
            raise ShapeError(
                f"expected (B, {cfg.in_channels}, H, W) input, got {img.shape}"
            )
        x = self.stem(img)
        for transition, stage in zip(self.transitions, self.stages):
            x = transition(x)
            x = stage(x)
        pooled = tmean(x, axis=(2, 3))
        return self.head(pooled)

    def block_sequence(self) -> list[list[str]]:
        """Per-stage list of block kinds ("NCB"/"NTB"), in forward order."""
        return [[b.kind for b in stage.blocks] for stage in self.stages]

    def lff_positions(self) -> list[tuple[int, int]]:
        """(stage, block) indices of blocks using the locality module."""
        hits = []
        for si, stage in enumerate(self.stages):
            for bi, block in enumerate(stage.blocks):
                if getattr(block, "use_lff", False):
                    hits.append((si, bi))
        return hits


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    """Construct a model with deterministic fan-in-scaled uniform init."""
    return Model(cfg, rng=np.random.default_rng(seed))
