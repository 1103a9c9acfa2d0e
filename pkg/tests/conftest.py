"""Shared oracles and helpers for the test suite.

Every oracle here is a deliberately naive, loop-level reimplementation of
the operation it checks, kept independent of the library's vectorized
paths so the two can disagree when one is wrong.
"""

import numpy as np
import pytest


def naive_conv2d(x, w, b=None, stride=1, padding=1, groups=1):
    """Reference convolution: seven explicit loops, zero padding."""
    bn, c_in, h, wdt = x.shape
    c_out, c_in_g, k, _ = w.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wdt + 2 * padding - k) // stride + 1
    xp = np.zeros((bn, c_in, h + 2 * padding, wdt + 2 * padding), dtype=x.dtype)
    xp[:, :, padding:padding + h, padding:padding + wdt] = x
    out = np.zeros((bn, c_out, ho, wo), dtype=x.dtype)
    out_per_group = c_out // groups
    for n in range(bn):
        for co in range(c_out):
            g = co // out_per_group
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c_in_g):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (w[co, ci, ki, kj] *
                                        xp[n, g * c_in_g + ci,
                                           i * stride + ki, j * stride + kj])
                    out[n, co, i, j] = acc
            if b is not None:
                out[n, co] += b[co]
    return out


def naive_avg_pool(x, s):
    """Reference pooling: explicit window loop with partial edge windows."""
    bn, c, h, w = x.shape
    ho = -(-h // s)
    wo = -(-w // s)
    out = np.zeros((bn, c, ho, wo), dtype=x.dtype)
    for i in range(ho):
        for j in range(wo):
            window = x[:, :, i * s:min((i + 1) * s, h), j * s:min((j + 1) * s, w)]
            out[:, :, i, j] = window.mean(axis=(2, 3))
    return out


def naive_softmax(x, axis=-1):
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def naive_attention(q, k, v):
    """Single-head attention: softmax(q k^T / sqrt(d)) v, plain numpy."""
    d = q.shape[-1]
    scores = q @ k.T / np.sqrt(d)
    return naive_softmax(scores, axis=-1) @ v


def naive_matmul(a, b):
    m, kk = a.shape
    _, n = b.shape
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            for t in range(kk):
                out[i, j] += a[i, t] * b[t, j]
    return out


def random_model_config(r: np.random.Generator):
    """Random miniature architecture satisfying every config invariant.

    Head counts, widths, and shrink ratios are drawn from combinations
    that keep both channel paths divisible by the head count; grid sides
    are derived backward from the number of downsampling stages.
    """
    from nextlvt.config import ModelConfig, StageSpec

    n_stages = int(r.integers(1, 4))
    heads = [int(r.choice([1, 2]))for _ in range(n_stages)]
    widths = [h * int(r.choice([4, 8])) for h in heads]
    stages = []
    for i in range(n_stages):
        stages.append(StageSpec(
            ncb_count=int(r.integers(0, 3)),
            repeats=int(r.integers(1, 3)),
            downsample=bool(r.integers(0, 2)) if i > 0 else False,
        ))
    downs = sum(s.downsample for s in stages)
    last_side = int(r.choice([1, 2]))
    stem_side = last_side * (2 ** downs)
    patch = int(r.choice([2, 4]))
    sides = []
    side = stem_side
    for s in stages:
        if s.downsample:
            side //= 2
        sides.append(side)
    pool = [int(r.choice([d for d in (1, 2, 4) if g % d == 0])) for g in sides]
    cfg = ModelConfig(
        in_channels=3,
        image_size=patch * stem_side,
        patch_size=patch,
        widths=widths,
        stages=stages,
        heads=heads,
        shrink_ratio=float(r.choice([0.25, 0.5, 0.75])),
        pool_strides=pool,
        mlp_ratio=int(r.choice([1, 2])),
        num_classes=int(r.integers(2, 6)),
        precision="float64",
    )
    return cfg.validate()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
