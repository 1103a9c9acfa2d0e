"""Parametric and stateless layers: convolution, linear, norms, pooling.

The 2-D convolution is cross-correlation (no kernel flip) and supports
strides, zero padding, and channel groups; the forward/backward pair is
implemented with an unrolled patch matrix so the heavy lifting is a single
matrix product per group. Normalization layers come in the two flavors the
blocks need: batch normalization over (B, H, W) per channel for the
convolutional paths, layer normalization over the trailing feature axis
for the attention paths.
"""

from __future__ import annotations

import numpy as np

from . import costs
from .errors import ConfigError, ShapeError
from .module import Module, Parameter
from .tensor import (
    Tensor,
    _make_output,
    as_tensor,
    matmul,
    reshape,
    sqrt,
    tmean,
)


def uniform_init(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    """Fan-in-scaled uniform draw, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def _unfold(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Gather k*k shifted views of a padded input into (B, C, k, k, ho, wo)."""
    b, c = xp.shape[:2]
    cols = np.empty((b, c, k, k, ho, wo), dtype=xp.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, :, ki, kj] = xp[:, :, ki:ki + stride * ho:stride,
                                    kj:kj + stride * wo:stride]
    return cols


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with optional channel groups.

    `x` is (B, C_in, H, W); `weight` is (C_out, C_in/groups, k, k). The
    output spatial size must come out integral for the given stride and
    padding, otherwise a `ShapeError` is raised.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(
            f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}"
        )
    b, c_in, h, w = x.shape
    c_out, c_in_g, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d kernel must be square, got {weight.shape}")
    if c_in % groups or c_out % groups:
        raise ShapeError(
            f"channel counts ({c_in} in, {c_out} out) not divisible by groups={groups}"
        )
    if c_in_g != c_in // groups:
        raise ShapeError(
            f"weight expects {c_in_g * groups} input channels, input has {c_in}"
        )
    if (h + 2 * padding - k) % stride or (w + 2 * padding - k) % stride:
        raise ShapeError(
            f"conv2d output size is not integral for input {h}x{w}, "
            f"kernel {k}, stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be empty: {ho}x{wo}")

    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _unfold(xp, k, stride, ho, wo)
    # (B, G, Cg_in*k*k, Ho*Wo) against (G, Cg_out, Cg_in*k*k)
    cols_g = cols.reshape(b, groups, (c_in // groups) * k * k, ho * wo)
    w_g = weight.data.reshape(groups, c_out // groups, (c_in // groups) * k * k)
    out = np.matmul(w_g, cols_g).reshape(b, c_out, ho, wo)
    costs.add_macs(b * c_out * ho * wo * (c_in // groups) * k * k)

    def backward(g):
        g_g = g.reshape(b, groups, c_out // groups, ho * wo)
        gw = np.matmul(g_g, cols_g.transpose(0, 1, 3, 2)).sum(axis=0)
        gcols = np.matmul(w_g.transpose(0, 2, 1), g_g)
        gcols = gcols.reshape(b, c_in, k, k, ho, wo)
        gxp = np.zeros_like(xp)
        for ki in range(k):
            for kj in range(k):
                gxp[:, :, ki:ki + stride * ho:stride,
                    kj:kj + stride * wo:stride] += gcols[:, :, ki, kj]
        if padding:
            gx = gxp[:, :, padding:padding + h, padding:padding + w]
        else:
            gx = gxp
        return gx, gw.reshape(weight.shape)

    result = _make_output(out, (x, weight), backward, "conv2d")
    if bias is not None:
        result = result + reshape(bias, (c_out, 1, 1))
    return result


def avg_pool2d(x: Tensor, stride: int) -> Tensor:
    """Non-overlapping window means (window size = stride).

    Output is ceil(H/stride) x ceil(W/stride); edge windows that hang off
    the input average only the covered entries. `stride=1` is the identity.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d expects a 4-D tensor, got {x.shape}")
    if stride < 1:
        raise ShapeError(f"avg_pool2d stride must be >= 1, got {stride}")
    if stride == 1:
        return x
    b, c, h, w = x.shape
    costs.add_elementwise(x.size)
    if h % stride == 0 and w % stride == 0:
        ho, wo = h // stride, w // stride
        out = x.data.reshape(b, c, ho, stride, wo, stride).mean(axis=(3, 5))

        def backward(g):
            gx = np.repeat(np.repeat(g, stride, axis=2), stride, axis=3)
            return (gx / (stride * stride),)

        return _make_output(out, (x,), backward, "avg_pool2d")

    ho = -(-h // stride)
    wo = -(-w // stride)
    out = np.empty((b, c, ho, wo), dtype=x.data.dtype)
    windows = []
    for i in range(ho):
        for j in range(wo):
            ys = slice(i * stride, min((i + 1) * stride, h))
            xs = slice(j * stride, min((j + 1) * stride, w))
            windows.append((i, j, ys, xs))
            out[:, :, i, j] = x.data[:, :, ys, xs].mean(axis=(2, 3))

    def backward(g):
        gx = np.zeros_like(x.data)
        for i, j, ys, xs in windows:
            n = (ys.stop - ys.start) * (xs.stop - xs.start)
            gx[:, :, ys, xs] += g[:, :, i:i + 1, j:j + 1] / n
        return (gx,)

    return _make_output(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# Linear and normalization
# ---------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map along the last axis: x @ weight (+ bias).

    `weight` is (D_in, D_out); any number of leading axes is allowed.
    """
    x = as_tensor(x)
    weight = as_tensor(weight)
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"linear input dim {x.shape[-1]} does not match weight {weight.shape}"
        )
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    out = matmul(flat, weight)
    if bias is not None:
        out = out + bias
    if x.ndim != 2:
        out = reshape(out, lead + (weight.shape[1],))
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Zero-mean unit-variance normalization over the last axis, then affine."""
    x = as_tensor(x)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"layer_norm affine params {gamma.shape}/{beta.shape} do not match "
            f"feature dim {x.shape[-1]}"
        )
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    normed = centered / sqrt(var + eps)
    return normed * gamma + beta


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor,
               running_mean: np.ndarray, running_var: np.ndarray, *,
               eps: float = 1e-5, momentum: float = 0.1,
               training: bool = True) -> Tensor:
    """Per-channel normalization of a (B, C, H, W) tensor.

    Training mode normalizes with current-batch statistics (population
    variance) and folds them into the running buffers in place with the
    given momentum; inference mode normalizes with the running buffers.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4-D tensor, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(
            f"batch_norm affine params {gamma.shape}/{beta.shape} do not match {c} channels"
        )
    g = reshape(gamma, (c, 1, 1))
    b = reshape(beta, (c, 1, 1))
    if training:
        mu = tmean(x, axis=(0, 2, 3), keepdims=True)
        centered = x - mu
        var = tmean(centered * centered, axis=(0, 2, 3), keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(c)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(c)
        normed = centered / sqrt(var + eps)
    else:
        rm = Tensor(running_mean.reshape(1, c, 1, 1).astype(x.dtype))
        rv = Tensor(running_var.reshape(1, c, 1, 1).astype(x.dtype))
        normed = (x - rm) / sqrt(rv + eps)
    return normed * g + b


# ---------------------------------------------------------------------------
# Layer modules
# ---------------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, *,
                 stride: int = 1, padding: int = 0, groups: int = 1,
                 bias: bool = True, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        if in_channels % groups or out_channels % groups:
            raise ConfigError(
                f"conv channels ({in_channels} in, {out_channels} out) "
                f"not divisible by groups={groups}"
            )
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.groups = groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        self.weight = Parameter(uniform_init(
            rng, (out_channels, in_channels // groups, kernel_size, kernel_size),
            fan_in, dtype))
        self.bias = Parameter(uniform_init(rng, (out_channels,), fan_in, dtype)) \
            if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=self.stride,
                      padding=self.padding, groups=self.groups)

    def param_count(self) -> int:
        n = self.out_channels * (self.in_channels // self.groups) * self.kernel_size ** 2
        if self.bias is not None:
            n += self.out_channels
        return n


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, *,
                 bias: bool = True, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = Parameter(uniform_init(
            rng, (in_features, out_features), in_features, dtype))
        self.bias = Parameter(uniform_init(rng, (out_features,), in_features, dtype)) \
            if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def param_count(self) -> int:
        n = self.in_features * self.out_features
        if self.bias is not None:
            n += self.out_features
        return n


class LayerNorm(Module):
    def __init__(self, dim: int, *, eps: float = 1e-5, dtype=np.float64):
        super().__init__()
        self.dim = dim
        self.eps = eps
        self.gamma = Parameter(np.ones(dim, dtype=dtype))
        self.beta = Parameter(np.zeros(dim, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def param_count(self) -> int:
        return 2 * self.dim


class BatchNorm2d(Module):
    def __init__(self, channels: int, *, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float64):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype))
        self.beta = Parameter(np.zeros(channels, dtype=dtype))
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.gamma, self.beta,
                          self.running_mean, self.running_var,
                          eps=self.eps, momentum=self.momentum,
                          training=self.training)

    def param_count(self) -> int:
        return 2 * self.channels
