"""
Minimal dense-tensor engine with reverse-mode automatic differentiation.

Every tensor wraps a float64 numpy array.  Operations that involve at least
one tensor with ``requires_grad`` record their parents and a closure that maps
the output adjoint to one adjoint per parent.  ``Tensor.backward`` walks the
recorded tape in reverse topological order.

There is no batch axis: feature maps are ``[channels, height, width]``.
"""

from __future__ import annotations

import itertools
import math
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, DimensionError, GradientCheckError

_node_ids = itertools.count(1)

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class Tensor:
    """A float64 array that may participate in reverse-mode differentiation."""

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self.node_id = next(_node_ids) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Wrap the result of an op.

        ``backward(g)`` must return one adjoint (or None) per parent.  When no
        parent requires a gradient the result is a plain constant.
        """
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out.node_id = next(_node_ids)
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out.node_id = None
            out._parents = ()
            out._backward = None
        out.grad = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        kind = "Tensor" if self.node_id is None else f"Tensor#{self.node_id}"
        return f"{kind}(shape={self.shape})"

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``.

        Leaves accumulate across calls; interior nodes are overwritten with the
        adjoint from this call only.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        order = _topological_order(self)
        adjoint: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = adjoint.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad += g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in adjoint:
                    adjoint[key] = adjoint[key] + pg
                else:
                    adjoint[key] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor with an SGD momentum buffer."""

    def __init__(self, data, name: str = ""):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.momentum_buffer = np.zeros_like(self.data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


class Module:
    """Container that discovers Parameters and sub-Modules held as attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            yield from _walk(value, f"{prefix}{attr}")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()


def _walk(value, path):
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value.named_parameters(path + ".")
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk(item, f"{path}.{i}")


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, opname: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{opname}: cannot combine shapes {a.shape} and {b.shape}") from None


# ----------------------------------------------------------------------------
# elementwise arithmetic
# ----------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "add")
    return Tensor.from_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "sub")
    return Tensor.from_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "mul")
    return Tensor.from_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape(a, b, "div")
    out = a.data / b.data
    return Tensor.from_op(
        out, (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def scale(a: Tensor, s: float) -> Tensor:
    return Tensor.from_op(a.data * s, (a,), lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    return Tensor.from_op(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def log(a: Tensor) -> Tensor:
    return Tensor.from_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor.from_op(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Dispatch ``add``/``mul`` (equal shapes) or ``broadcast_mul``.

    ``broadcast_mul`` lets ``b`` broadcast into ``a``'s shape, e.g. ``[c,1,1]``
    against ``[c,h,w]``; the result always has ``a``'s shape.
    """
    if op in ("add", "mul"):
        if a.shape != b.shape:
            raise DimensionError(f"{op}: shapes differ, {a.shape} vs {b.shape}")
        return add(a, b) if op == "add" else mul(a, b)
    if op == "broadcast_mul":
        if _broadcast_shape(a, b, op) != a.shape:
            raise DimensionError(f"broadcast_mul: {b.shape} does not broadcast into {a.shape}")
        return mul(a, b)
    raise ValueError(f"unknown elementwise op {op!r}")


# ----------------------------------------------------------------------------
# activations
# ----------------------------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return Tensor.from_op(s, (x,), lambda g: (g * s * (1.0 - s),))


def relu(x: Tensor) -> Tensor:
    on = x.data > 0
    return Tensor.from_op(x.data * on, (x,), lambda g: (g * on,))


def softplus(x: Tensor) -> Tensor:
    return Tensor.from_op(np.logaddexp(0.0, x.data), (x,), lambda g: (g * _sigmoid(x.data),))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    t = np.tanh(_GELU_C * (v + _GELU_A * v ** 3))

    def backward(g):
        dt = (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * dt),)

    return Tensor.from_op(0.5 * v * (1.0 + t), (x,), backward)


_ACTIVATIONS = {"gelu": gelu, "sigmoid": sigmoid, "relu": relu, "softplus": softplus}


def activation(op: str, x: Tensor) -> Tensor:
    try:
        return _ACTIVATIONS[op](x)
    except KeyError:
        raise ValueError(f"unknown activation {op!r}") from None


# ----------------------------------------------------------------------------
# reductions and reshapes
# ----------------------------------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Tensor.from_op(np.asarray(out, dtype=np.float64), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(a: Tensor, shape) -> Tensor:
    return Tensor.from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from None
    return Tensor.from_op(out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


def gap(x: Tensor) -> Tensor:
    """Global average pooling ``[c,h,w] -> [c,1,1]``."""
    if x.data.ndim != 3:
        raise DimensionError(f"gap expects [c,h,w], got {x.shape}")
    if x.shape[1] * x.shape[2] < 1:
        raise DimensionError("gap needs at least one spatial cell")
    return mean(x, axis=(1, 2), keepdims=True)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} @ {b.shape}")
    return Tensor.from_op(
        a.data @ b.data, (a, b),
        lambda g: (g @ b.data.T if a.requires_grad else None,
                   a.data.T @ g if b.requires_grad else None),
    )


# ----------------------------------------------------------------------------
# spatial ops
# ----------------------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x [c_in,h,w]`` with ``weight [c_out,c_in,k,k]``."""
    if x.data.ndim != 3 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects [c,h,w] and [o,c,k,k], got {x.shape}, {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if x.shape[0] != c_in:
        raise DimensionError(f"conv2d: input has {x.shape[0]} channels, kernel expects {c_in}")
    if k != k2 or k % 2 == 0:
        raise DimensionError(f"conv2d kernel must be square and odd, got {k}x{k2}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    _, h, w = x.shape
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"conv2d: {h}x{w} input with padding {padding} is smaller than kernel {k}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1

    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    windows = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride][:, :ho, :wo]
    out = np.tensordot(weight.data, windows, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d bias must be ({c_out},), got {bias.shape}")
        out = out + bias.data[:, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(weight.data[:, :, i, j], g, axes=([0], [0]))
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
            gx = gxp[:, padding:padding + h, padding:padding + w] if padding else gxp
        gw = np.tensordot(g, windows, axes=([1, 2], [1, 2])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(1, 2))

    return Tensor.from_op(out, parents, backward)


def upsample_nearest2x(x: Tensor) -> Tensor:
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return Tensor.from_op(out, (x,), lambda g: (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),))


# ----------------------------------------------------------------------------
# gradient checking
# ----------------------------------------------------------------------------

def gradient_check_report(f: Callable[[], Tensor], params: Sequence[Parameter],
                          eps: float = 1e-5, samples_per_param: int = 6,
                          seed: int = 0) -> dict[str, float]:
    """Per-parameter max relative error between backprop and central differences.

    Relative error is ``|analytic - numeric| / max(1, |numeric|)``.  ``f`` is
    re-run for every perturbation, so it must be deterministic.
    """
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.all(np.isfinite(loss.data)):
        raise GradientCheckError("loss is not finite at the base point")
    loss.backward()
    analytic = {id(p): p.grad.copy() for p in params}
    rng = np.random.default_rng(seed)
    report: dict[str, float] = {}
    for idx, p in enumerate(params):
        label = getattr(p, "name", "") or f"param[{idx}]"
        if not np.all(np.isfinite(analytic[id(p)])):
            raise GradientCheckError(f"non-finite analytic gradient for {label}")
        flat = p.data.reshape(-1)
        n = min(samples_per_param, flat.size)
        coords = rng.choice(flat.size, size=n, replace=False)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            up = float(f().data.reshape(-1)[0])
            flat[c] = orig - eps
            down = float(f().data.reshape(-1)[0])
            flat[c] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradientCheckError(f"non-finite loss while perturbing {label}")
            numeric = (up - down) / (2.0 * eps)
            err = abs(analytic[id(p)].reshape(-1)[c] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
        report[label] = worst
    for p in params:
        p.zero_grad()
    return report


def gradient_check(f: Callable[[], Tensor], params: Sequence[Parameter],
                   eps: float = 1e-5, samples_per_param: int = 6, seed: int = 0) -> float:
    """Max relative error over sampled coordinates of all ``params``."""
    report = gradient_check_report(f, params, eps, samples_per_param, seed)
    return max(report.values(), default=0.0)
