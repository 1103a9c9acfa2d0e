"""Central finite-difference verification of reverse-mode gradients.

For a scalar-valued function of several tensors, each coordinate is
perturbed by +/-h and the centered difference is compared against the
taped gradient. The error metric is |fd - ad| / max(|fd|, |ad|, floor);
the floor keeps near-zero gradients from inflating the ratio while still
demanding absolute agreement well below the tolerance.

Finite differences are only valid where the function is differentiable,
so draws that place any rectifier input within `KINK_MARGIN` of zero are
redrawn with a derived seed (the kink watcher in the tensor core reports
the closest approach during a probe forward pass).
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, tmean, watch_relu_kinks

KINK_MARGIN = 1e-4


def finite_difference(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                      h: float = 1e-5, sample: int | None = None,
                      rng: np.random.Generator | None = None):
    """Centered-difference gradients of `loss_fn` w.r.t. each tensor.

    `loss_fn` must recompute the loss from the tensors' current buffers.
    When `sample` is given, only that many randomly chosen coordinates per
    tensor are probed (returned as (flat_indices, grads) pairs).
    """
    results = []
    for t in tensors:
        flat = t.data.reshape(-1)
        if sample is not None and sample < flat.size:
            if rng is None:
                raise ValueError("sampling requires an rng")
            idx = rng.choice(flat.size, size=sample, replace=False)
        else:
            idx = np.arange(flat.size)
        grads = np.empty(idx.size, dtype=np.float64)
        for j, i in enumerate(idx):
            original = flat[i]
            flat[i] = original + h
            up = loss_fn().item()
            flat[i] = original - h
            down = loss_fn().item()
            flat[i] = original
            grads[j] = (up - down) / (2.0 * h)
        results.append((idx, grads))
    return results


def relative_error(fd: np.ndarray, ad: np.ndarray, floor: float = 1e-3) -> float:
    """Worst |fd - ad| / max(|fd|, |ad|, floor) over all coordinates.

    Coordinates whose gradients sit below `floor` are effectively compared
    absolutely at tolerance * floor; the float32 suites use a larger floor
    because gradients below float32 quantization noise carry no signal.
    """
    denom = np.maximum(np.maximum(np.abs(fd), np.abs(ad)), floor)
    return float(np.max(np.abs(fd - ad) / denom)) if fd.size else 0.0


def check_gradients(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                    h: float = 1e-5, sample: int | None = None,
                    rng: np.random.Generator | None = None,
                    floor: float = 1e-3) -> float:
    """Max relative error between taped and finite-difference gradients."""
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    taped = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
             for t in tensors]
    worst = 0.0
    for t, analytic, (idx, fd) in zip(
            tensors, taped, finite_difference(loss_fn, tensors, h, sample, rng)):
        worst = max(worst, relative_error(fd, analytic.reshape(-1)[idx], floor))
    return worst


def probe_kink_distance(loss_fn: Callable[[], Tensor]) -> float:
    """Closest approach of any rectifier input to zero during one forward."""
    sink: list[float] = []
    prev = watch_relu_kinks(sink)
    try:
        loss_fn()
    finally:
        watch_relu_kinks(prev)
    return min(sink) if sink else np.inf


def draw_away_from_kinks(make_case: Callable[[np.random.Generator], tuple],
                         seed: int, margin: float = KINK_MARGIN,
                         attempts: int = 20):
    """Build a check case whose rectifier inputs stay off the kink.

    `make_case(rng)` returns (loss_fn, tensors); cases whose forward pass
    brings a rectifier input within `margin` of zero are rejected and
    redrawn with a derived seed, keeping the finite-difference comparison
    mathematically valid.
    """
    for attempt in range(attempts):
        rng = np.random.default_rng(np.random.SeedSequence((seed, attempt)))
        loss_fn, tensors = make_case(rng)
        if probe_kink_distance(loss_fn) > margin:
            return loss_fn, tensors
    raise RuntimeError(
        f"could not draw a kink-free case in {attempts} attempts (seed {seed})"
    )


# ---------------------------------------------------------------------------
# Standard check cases (used by the CLI and the acceptance suite)
# ---------------------------------------------------------------------------

def _weighted_sum(out: Tensor, coef: Tensor) -> Tensor:
    # Mean keeps the probe loss O(1) regardless of output size, which keeps
    # the cancellation noise in (f(x+h) - f(x-h)) well below the tolerance.
    return tmean(out * coef)


def _module_case(build_module, input_shape, dtype, forward=None):
    """Case factory for a module: perturb its input and every parameter."""

    def make(rng: np.random.Generator):
        module = build_module(rng)
        x = Tensor(rng.uniform(-1.0, 1.0, size=input_shape).astype(dtype),
                   requires_grad=True)
        probe = module(x) if forward is None else forward(module, x)
        coef = Tensor(rng.uniform(-1.0, 1.0, size=probe.shape).astype(dtype))

        def loss_fn():
            out = module(x) if forward is None else forward(module, x)
            return _weighted_sum(out, coef)

        tensors = [x] + [p for _, p in module.named_parameters()]
        return loss_fn, tensors

    return make


def standard_cases(dtype=np.float64):
    """Name -> case builder for every differentiable op and block."""
    from .attention import MultiHeadConvAttention, SelfAttention
    from .blocks import ConvBlock, LocalFeedForward, TransformerBlock, build_model
    from .config import micro_config
    from .layers import (avg_pool2d, batch_norm, conv2d, layer_norm, linear)
    from .tensor import gelu, log_softmax, matmul, relu, softmax

    def tensor_case(shapes, fn):
        def make(rng):
            tensors = [
                Tensor(rng.uniform(-1.0, 1.0, size=s).astype(dtype),
                       requires_grad=True)
                for s in shapes
            ]
            probe = fn(*tensors)
            coef = Tensor(rng.uniform(-1.0, 1.0, size=probe.shape).astype(dtype))
            return (lambda: _weighted_sum(fn(*tensors), coef)), tensors
        return make

    cases = {
        "matmul": tensor_case([(3, 4), (4, 2)], matmul),
        "matmul_batched": tensor_case([(2, 3, 2, 4), (1, 3, 4, 2)], matmul),
        "softmax": tensor_case([(2, 5)], lambda x: softmax(x, axis=-1)),
        "log_softmax": tensor_case([(2, 5)], lambda x: log_softmax(x, axis=-1)),
        "relu": tensor_case([(3, 4)], relu),
        "gelu": tensor_case([(3, 4)], gelu),
        "linear": tensor_case([(3, 4), (4, 3), (3,)], linear),
        "conv2d": tensor_case(
            [(2, 3, 5, 5), (4, 3, 3, 3), (4,)],
            lambda x, w, b: conv2d(x, w, b, stride=1, padding=1)),
        "conv2d_grouped": tensor_case(
            [(2, 4, 4, 4), (6, 2, 3, 3), (6,)],
            lambda x, w, b: conv2d(x, w, b, stride=1, padding=1, groups=2)),
        "conv2d_strided": tensor_case(
            [(1, 2, 6, 6), (3, 2, 2, 2)],
            lambda x, w: conv2d(x, w, stride=2)),
        "avg_pool": tensor_case([(2, 3, 4, 4)], lambda x: avg_pool2d(x, 2)),
        "avg_pool_ragged": tensor_case([(1, 2, 5, 5)], lambda x: avg_pool2d(x, 2)),
        "layer_norm": tensor_case(
            [(2, 3, 6), (6,), (6,)], lambda x, g, b: layer_norm(x, g, b)),
        "batch_norm": tensor_case(
            [(3, 4, 3, 3), (4,), (4,)],
            lambda x, g, b: batch_norm(x, g, b, np.zeros(4), np.ones(4),
                                       training=True)),
        "sdpa": _module_case(
            lambda rng: SelfAttention(4, 2, pool_stride=1, rng=rng, dtype=dtype),
            (1, 6, 4), dtype,
            forward=lambda m, x: m(x)),
        "e_mhsa": _module_case(
            lambda rng: SelfAttention(4, 2, pool_stride=2, rng=rng, dtype=dtype),
            (1, 16, 4), dtype,
            forward=lambda m, x: m(x, (4, 4))),
        "mhca": _module_case(
            lambda rng: MultiHeadConvAttention(4, 2, rng=rng, dtype=dtype),
            (2, 4, 4, 4), dtype),
        "lff": _module_case(
            lambda rng: LocalFeedForward(4, 2, rng=rng, dtype=dtype),
            (2, 4, 3, 3), dtype),
        "ncb": _module_case(
            lambda rng: ConvBlock(4, 2, 2, rng=rng, dtype=dtype),
            (2, 4, 4, 4), dtype),
        "ntb": _module_case(
            lambda rng: TransformerBlock(
                8, 2, shrink_ratio=0.75, pool_stride=2, mlp_ratio=2,
                use_lff=True, rng=rng, dtype=dtype),
            (1, 8, 4, 4), dtype),
        "model": _module_case(
            lambda rng: build_model(
                micro_config(precision={np.float64: "float64",
                                        np.float32: "float32"}[dtype]),
                seed=int(rng.integers(1 << 31))),
            (2, 3, 8, 8), dtype),
    }
    return cases


# Per-case steps for float32 checks. Linear maps have zero second derivative,
# so a large step only averages away float32 rounding noise; smooth nonlinear
# ops balance h^2 truncation against that noise; the rectifier needs a small
# step plus a wide kink margin. Multi-layer blocks with internal rectifiers
# are not meaningfully checkable at float32 and are restricted to 64-bit.
_F32_H = {
    "matmul": 0.1, "matmul_batched": 0.1, "linear": 0.1,
    "conv2d": 0.1, "conv2d_grouped": 0.1, "conv2d_strided": 0.1,
    "avg_pool": 0.1, "avg_pool_ragged": 0.1,
    "relu": 1e-3,
}
_F32_DEFAULT_H = 0.01
_F32_KINK_MARGIN = 1e-2
_F32_FLOOR = 5e-2

FLOAT32_CASES = (
    "matmul", "matmul_batched", "softmax", "log_softmax", "relu", "gelu",
    "linear", "conv2d", "conv2d_grouped", "conv2d_strided", "avg_pool",
    "avg_pool_ragged", "layer_norm", "batch_norm",
)


def run_standard_check(name: str, *, seeds: int = 20, dtype=np.float64,
                       h: float | None = None, sample: int | None = None) -> float:
    """Run one named case over several seeds; returns the worst error."""
    cases = standard_cases(dtype)
    if name not in cases:
        raise KeyError(f"unknown gradcheck target {name!r}; "
                       f"choose from {sorted(cases)}")
    if dtype == np.float32:
        if name not in FLOAT32_CASES:
            raise KeyError(
                f"{name!r} is only checkable at 64-bit (float32 finite "
                f"differences cannot resolve multi-layer rectifier paths)"
            )
        if h is None:
            h = _F32_H.get(name, _F32_DEFAULT_H)
        margin = _F32_KINK_MARGIN
        floor = _F32_FLOOR
    else:
        if h is None:
            h = 3e-6
        margin = KINK_MARGIN
        floor = 1e-3
    worst = 0.0
    for seed in range(seeds):
        loss_fn, tensors = draw_away_from_kinks(cases[name], seed, margin=margin)
        need_sample = sample
        if need_sample is None and name == "model":
            need_sample = 20
        err = check_gradients(loss_fn, tensors, h=h, sample=need_sample,
                              rng=np.random.default_rng(seed + 7919), floor=floor)
        worst = max(worst, err)
    return worst
