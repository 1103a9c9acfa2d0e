"""Hybrid convolution/transformer image classifier on an in-repo autodiff core."""

from .augmix import AugmixConfig, apply_op, augmix, mix_images, rng_for_sample
from .blocks import (
    ConvBlock,
    LocalFeedForward,
    Model,
    PatchEmbed,
    TransformerBlock,
    build_model,
    token_count,
    token_dim,
)
from .attention import (
    MultiHeadConvAttention,
    SelfAttention,
    grid_to_tokens,
    tokens_to_grid,
)
from .config import (
    ModelConfig,
    StageSpec,
    config_from_text,
    config_to_text,
    desk_config,
    load_config,
    micro_config,
    save_config,
)
from .data import (
    ArrayDataset,
    Manifest,
    ManifestDataset,
    Sample,
    load_checkpoint,
    load_manifest,
    load_ppm,
    preprocess,
    resize_bilinear,
    save_checkpoint,
    save_ppm,
)
from .errors import (
    ConfigError,
    ContractError,
    CorruptionError,
    FormatError,
    NumericError,
    ParseError,
    ShapeError,
)
from .layers import avg_pool2d, batch_norm, conv2d, layer_norm, linear
from .module import Module, Parameter
from .profiler import CostReport, count_params, estimate_flops
from .tensor import (
    Tape,
    Tensor,
    gelu,
    log_softmax,
    matmul,
    relu,
    softmax,
    tmean,
    tsum,
)
from .train import (
    SGD,
    TrainConfig,
    TrainState,
    cross_entropy,
    evaluate,
    lr_at,
    train,
)

__version__ = "0.1.0"
