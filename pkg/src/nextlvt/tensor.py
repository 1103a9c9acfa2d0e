"""Dense N-dimensional tensors with reverse-mode automatic differentiation.

Tensors wrap a row-major numpy buffer in one of two precisions: float64
(verification mode, used by every gradient-check suite) or float32 (speed
mode, used for training runs). Differentiable ops record themselves on the
innermost active `Tape`; running `backward` on a scalar result walks the
tape once in reverse and accumulates gradients into the participating leaf
tensors. A tape is consumed by its backward pass and must be rebuilt by a
fresh forward pass, which matches the train-step lifecycle and rules out
aliasing between steps.

Every op validates that finite inputs produced finite outputs: overflow
raises `NumericError` instead of propagating silently.
"""

from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

from . import costs
from .errors import ContractError, NumericError, ShapeError

FLOAT_DTYPES = {"float32": np.float32, "float64": np.float64}

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Node:
    """One recorded op: inputs, output, and the rule mapping the output
    gradient to per-input gradients (None for non-differentiable inputs)."""

    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Append-only record of ops for one forward pass.

    Use as a context manager around the forward computation; ops record
    themselves only while a tape is active and at least one input requires
    gradients. `backward` may run exactly once per tape.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.remove(self)

    def backward(self, loss: "Tensor") -> None:
        """Populate `.grad` on every requires_grad leaf reachable from `loss`."""
        if loss.size != 1:
            raise ContractError(
                f"backward requires a scalar loss, got shape {loss.shape}"
            )
        if self.consumed:
            raise ContractError(
                "tape already consumed by a previous backward; run a new forward pass"
            )
        self.consumed = True

        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data)
        }
        if loss._is_leaf and loss.requires_grad:
            loss._accumulate_grad(grads[id(loss)])
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            input_grads = node.backward(g_out)
            for tensor, g in zip(node.inputs, input_grads):
                if g is None or not tensor.requires_grad:
                    continue
                if tensor._is_leaf:
                    tensor._accumulate_grad(g)
                else:
                    prev = grads.get(id(tensor))
                    grads[id(tensor)] = g if prev is None else prev + g


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


# ---------------------------------------------------------------------------
# Tensor
# ---------------------------------------------------------------------------

class Tensor:
    """Dense array of real scalars, optionally participating in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "_is_leaf", "_tape")

    def __init__(self, data, dtype=None, requires_grad: bool = False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._is_leaf = True
        self._tape: Tape | None = None

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() requires a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # -- gradient plumbing --------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate_grad(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        if self._tape is None:
            raise ContractError("tensor was not recorded on a tape; nothing to differentiate")
        self._tape.backward(self)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_constant_like(other, self), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_constant_like(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


# ---------------------------------------------------------------------------
# Recording helpers
# ---------------------------------------------------------------------------

_NAN_GUARD = True


def set_nan_guard(enabled: bool) -> bool:
    """Toggle the finite-output check on every op; returns the old setting."""
    global _NAN_GUARD
    prev = _NAN_GUARD
    _NAN_GUARD = enabled
    return prev


def _guard(arr: np.ndarray, op_name: str) -> np.ndarray:
    if _NAN_GUARD and not np.all(np.isfinite(arr)):
        raise NumericError(f"{op_name} produced non-finite values")
    return arr


def _make_output(arr: np.ndarray, inputs: tuple[Tensor, ...], backward, op_name: str) -> Tensor:
    out = Tensor(_guard(arr, op_name))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._is_leaf = False
        out._tape = tape
        tape.nodes.append(Node(inputs, out, backward))
    return out


def _constant_like(value, ref: Tensor) -> Tensor:
    return Tensor(np.asarray(value, dtype=ref.data.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else _constant_like(b, a)
    out = a.data + b.data
    costs.add_elementwise(out.size)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make_output(out, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else _constant_like(b, a)
    out = a.data - b.data
    costs.add_elementwise(out.size)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make_output(out, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else _constant_like(b, a)
    out = a.data * b.data
    costs.add_elementwise(out.size)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make_output(out, (a, b), backward, "mul")


def div(a: Tensor, b) -> Tensor:
    a = as_tensor(a)
    b = b if isinstance(b, Tensor) else _constant_like(b, a)
    out = a.data / b.data
    costs.add_elementwise(out.size)

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make_output(out, (a, b), backward, "div")


def neg(a: Tensor) -> Tensor:
    out = -a.data
    costs.add_elementwise(out.size)

    def backward(g):
        return (-g,)

    return _make_output(out, (a,), backward, "neg")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    costs.add_elementwise(out.size)

    def backward(g):
        return (g * out,)

    return _make_output(out, (a,), backward, "exp")


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    costs.add_elementwise(out.size)

    def backward(g):
        return (g / a.data,)

    return _make_output(out, (a,), backward, "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    costs.add_elementwise(out.size)

    def backward(g):
        return (g * (0.5 / out),)

    return _make_output(out, (a,), backward, "sqrt")


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

# When set (a list), relu appends min(|x|) of each call so gradient checks
# can reject draws that sit on the kink, where finite differences are invalid.
_KINK_WATCH: list[float] | None = None


def watch_relu_kinks(sink: list[float] | None) -> list[float] | None:
    global _KINK_WATCH
    prev = _KINK_WATCH
    _KINK_WATCH = sink
    return prev


def relu(a: Tensor) -> Tensor:
    if _KINK_WATCH is not None and a.data.size:
        _KINK_WATCH.append(float(np.min(np.abs(a.data))))
    out = np.maximum(a.data, 0)
    costs.add_elementwise(out.size)
    mask = a.data > 0

    def backward(g):
        return (g * mask,)

    return _make_output(out, (a,), backward, "relu")


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, exact erf form."""
    x = a.data
    cdf = 0.5 * (1.0 + _erf(x * _INV_SQRT2))
    out = x * cdf
    costs.add_elementwise(out.size)

    def backward(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (cdf + x * pdf),)

    return _make_output(out, (a,), backward, "gelu")


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "gelu": gelu,
    "identity": identity,
}


# ---------------------------------------------------------------------------
# Matrix product
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(
            f"matmul requires at least 2-D operands, got {a.shape} and {b.shape}"
        )
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} vs {b.shape}"
        )
    out = np.matmul(a.data, b.data)
    m, k = a.shape[-2], a.shape[-1]
    n = b.shape[-1]
    costs.add_macs(int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * n)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return _make_output(out, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.shape),)

    return _make_output(out, (a,), backward, "reshape")


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    out = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        return (np.transpose(g, inverse),)

    return _make_output(out, (a,), backward, "transpose")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = tuple(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make_output(out, tensors, backward, "concat")


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis` starting at `start`."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(
            f"narrow [{start}:{start + length}] out of bounds for axis {axis} of {a.shape}"
        )
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        full[index] = g
        return (full,)

    return _make_output(out, (a,), backward, "narrow")


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    costs.add_elementwise(a.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make_output(out, (a,), backward, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.data.mean(axis=axes, keepdims=keepdims)
    costs.add_elementwise(a.size)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy() / count,)

    return _make_output(out, (a,), backward, "mean")


# ---------------------------------------------------------------------------
# Softmax family
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Exp-normalization along `axis`, stabilized by max subtraction."""
    axis = axis % a.ndim if a.ndim else 0
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    costs.add_elementwise(3 * out.size)

    def backward(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return _make_output(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Log of softmax along `axis`, computed with a stable log-sum-exp."""
    axis = axis % a.ndim if a.ndim else 0
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    costs.add_elementwise(3 * out.size)
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return _make_output(out, (a,), backward, "log_softmax")


def backward(loss: Tensor) -> None:
    """Run reverse-mode differentiation from a scalar `loss`."""
    loss.backward()


def zeros(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=np.float64, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
