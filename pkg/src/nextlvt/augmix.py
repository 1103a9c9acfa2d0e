"""Stochastic augmentation mixing for training images.

An augmented sample is a convex blend of the clean image with several
short chains of randomly drawn ops:

    out = m * img + (1 - m) * sum_i w_i * chain_i(img)

with chain weights `w ~ Dirichlet(alpha, ..., alpha)` and skip weight
`m ~ Beta(alpha, alpha)`. Images are float arrays of shape (C, H, W) with
values in [0, 1]; every op preserves shape and range, so labels stay
valid. The default op set deliberately omits color/contrast/brightness
distortions (they overlap common evaluation corruptions) and any flip or
half-turn (traffic-sign semantics are orientation-dependent).

Draw order is part of the contract (tests replay it): first the chain
weights, then the skip weight, then per chain its depth followed by, per
slot, the op index and that op's own magnitude/sign draws.

Severity runs 1-10. Magnitude-bearing ops draw their strength uniformly
from [0.1, severity] and scale it by the per-op maximum listed below.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError

DEFAULT_OPS = (
    "autocontrast", "equalize", "posterize", "solarize",
    "rotate", "shear-x", "shear-y", "translate-x", "translate-y",
)

MAX_ROTATE_DEG = 30.0     # severity 10 rotates up to +/- 30 degrees
MAX_SHEAR = 0.3           # severity 10 shears up to +/- 0.3
MAX_TRANSLATE = 1.0 / 3.0  # severity 10 shifts up to a third of the side
MIN_POSTERIZE_BITS = 4    # severity 10 keeps 4 of 8 bits


@dataclass
class AugmixConfig:
    width: int = 3
    depth: int = 3
    severity: int = 3
    alpha: float = 1.0
    seed: int = 0
    ops: tuple[str, ...] = DEFAULT_OPS

    def validate(self) -> "AugmixConfig":
        if self.width < 1:
            raise ConfigError(f"augmix width must be >= 1, got {self.width}")
        if self.depth < 1:
            raise ConfigError(f"augmix depth must be >= 1, got {self.depth}")
        if not 1 <= self.severity <= 10:
            raise ConfigError(f"augmix severity must be in [1, 10], got {self.severity}")
        if self.alpha <= 0:
            raise ConfigError(f"augmix alpha must be > 0, got {self.alpha}")
        for name in self.ops:
            if name not in _OPS:
                raise ConfigError(f"unknown augmentation op {name!r}")
        return self


def rng_for_sample(seed: int, *indices: int) -> np.random.Generator:
    """Independent stream per (seed, sample) so worker order cannot matter."""
    return np.random.default_rng(np.random.SeedSequence((seed,) + indices))


# ---------------------------------------------------------------------------
# Individual ops
# ---------------------------------------------------------------------------

def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3:
        raise ContractError(f"expected a (C, H, W) image, got shape {img.shape}")
    if img.size and (img.min() < 0.0 or img.max() > 1.0):
        raise ContractError("image values must lie in [0, 1]")
    return img


def _magnitude(severity: int, rng: np.random.Generator) -> float:
    """Fraction of the op's maximum strength: U(0.1, severity) / 10."""
    return rng.uniform(0.1, float(severity)) / 10.0


def _signed(severity: int, rng: np.random.Generator) -> float:
    mag = _magnitude(severity, rng)
    return mag if rng.integers(2) == 0 else -mag


def _autocontrast(img, severity, rng):
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        lo = img[c].min()
        hi = img[c].max()
        out[c] = (img[c] - lo) / (hi - lo) if hi > lo else img[c]
    return out


def _equalize(img, severity, rng):
    out = np.empty_like(img)
    for c in range(img.shape[0]):
        q = np.clip(np.floor(img[c] * 255.0 + 0.5), 0, 255).astype(np.int64)
        counts = np.bincount(q.reshape(-1), minlength=256)
        cdf = np.cumsum(counts)
        nonzero = cdf[counts > 0]
        cdf_min = nonzero[0] if nonzero.size else 0
        total = cdf[-1]
        if total == cdf_min:
            out[c] = img[c]
            continue
        lut = np.rint((cdf - cdf_min) * 255.0 / (total - cdf_min))
        out[c] = np.clip(lut[q], 0, 255) / 255.0
    return out


def posterize_bits(img: np.ndarray, bits: int) -> np.ndarray:
    """Quantize to 8 bits and zero out all but the top `bits` bits."""
    q = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    mask = np.uint8(0xFF & ~((1 << (8 - bits)) - 1))
    return (q & mask).astype(img.dtype) / 255.0


def _posterize(img, severity, rng):
    frac = _magnitude(severity, rng)
    bits = 8 - int(round(frac * (8 - MIN_POSTERIZE_BITS)))
    return posterize_bits(img, bits)


def solarize_threshold(img: np.ndarray, threshold: float) -> np.ndarray:
    """Invert every pixel strictly above `threshold`."""
    return np.where(img > threshold, 1.0 - img, img)


def _solarize(img, severity, rng):
    threshold = 1.0 - _magnitude(severity, rng)
    return solarize_threshold(img, threshold)


def affine_warp(img: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Inverse-map an affine transform with bilinear sampling, zero fill.

    `matrix` is 2x3 and maps output pixel coordinates (x, y, 1) to source
    coordinates; the transform is centered so the matrix acts about the
    image midpoint.
    """
    c, h, w = img.shape
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    cy = (h - 1) / 2.0
    cx = (w - 1) / 2.0
    dx = xs - cx
    dy = ys - cy
    src_x = matrix[0, 0] * dx + matrix[0, 1] * dy + matrix[0, 2] + cx
    src_y = matrix[1, 0] * dx + matrix[1, 1] * dy + matrix[1, 2] + cy

    x0 = np.floor(src_x)
    y0 = np.floor(src_y)
    fx = src_x - x0
    fy = src_y - y0
    out = np.zeros_like(img)
    for oy, ox, weight in ((0, 0, (1 - fy) * (1 - fx)),
                           (0, 1, (1 - fy) * fx),
                           (1, 0, fy * (1 - fx)),
                           (1, 1, fy * fx)):
        yy = y0 + oy
        xx = x0 + ox
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yi = np.clip(yy, 0, h - 1).astype(np.int64)
        xi = np.clip(xx, 0, w - 1).astype(np.int64)
        contrib = img[:, yi, xi] * (weight * inside)
        out += contrib
    return np.clip(out, 0.0, 1.0)


def _rotate(img, severity, rng):
    angle = np.deg2rad(_signed(severity, rng) * MAX_ROTATE_DEG)
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    matrix = np.array([[cos_a, -sin_a, 0.0], [sin_a, cos_a, 0.0]])
    return affine_warp(img, matrix)


def _shear_x(img, severity, rng):
    k = _signed(severity, rng) * MAX_SHEAR
    return affine_warp(img, np.array([[1.0, k, 0.0], [0.0, 1.0, 0.0]]))


def _shear_y(img, severity, rng):
    k = _signed(severity, rng) * MAX_SHEAR
    return affine_warp(img, np.array([[1.0, 0.0, 0.0], [k, 1.0, 0.0]]))


def _translate_x(img, severity, rng):
    t = _signed(severity, rng) * MAX_TRANSLATE * img.shape[2]
    return affine_warp(img, np.array([[1.0, 0.0, t], [0.0, 1.0, 0.0]]))


def _translate_y(img, severity, rng):
    t = _signed(severity, rng) * MAX_TRANSLATE * img.shape[1]
    return affine_warp(img, np.array([[1.0, 0.0, 0.0], [0.0, 1.0, t]]))


def _identity(img, severity, rng):
    return img


_OPS = {
    "autocontrast": _autocontrast,
    "equalize": _equalize,
    "posterize": _posterize,
    "solarize": _solarize,
    "rotate": _rotate,
    "shear-x": _shear_x,
    "shear-y": _shear_y,
    "translate-x": _translate_x,
    "translate-y": _translate_y,
    "identity": _identity,
}


def apply_op(img: np.ndarray, name: str, severity: int,
             rng: np.random.Generator) -> np.ndarray:
    """Apply one named op at the given severity; unknown names are rejected."""
    fn = _OPS.get(name)
    if fn is None:
        raise ConfigError(f"unknown augmentation op {name!r}")
    if not 1 <= severity <= 10:
        raise ConfigError(f"severity must be in [1, 10], got {severity}")
    return fn(_check_image(img), severity, rng)


# ---------------------------------------------------------------------------
# Mixing
# ---------------------------------------------------------------------------

def mix_images(img: np.ndarray, chains: list[np.ndarray], weights: np.ndarray,
               skip: float) -> np.ndarray:
    """Deterministic mixing formula: skip*img + (1-skip)*sum(w_i*chain_i)."""
    mix = np.zeros_like(img)
    for w, chain in zip(weights, chains):
        mix += w * chain
    return np.clip(skip * img + (1.0 - skip) * mix, 0.0, 1.0)


def augmix(img: np.ndarray, cfg: AugmixConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw chain/skip weights and op chains, then blend. Shape-preserving."""
    cfg.validate()
    img = _check_image(img)
    weights = rng.dirichlet([cfg.alpha] * cfg.width)
    skip = rng.beta(cfg.alpha, cfg.alpha)
    chains = []
    for _ in range(cfg.width):
        depth = int(rng.integers(1, cfg.depth + 1))
        chain = img
        for _ in range(depth):
            op = cfg.ops[int(rng.integers(len(cfg.ops)))]
            chain = apply_op(chain, op, cfg.severity, rng)
        chains.append(chain)
    return mix_images(img, chains, weights, skip)
