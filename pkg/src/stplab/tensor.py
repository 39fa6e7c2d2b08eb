"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every differentiable computation goes through :func:`apply_primitive`, which
evaluates a kernel from ``PRIMITIVES`` and, when any input requires a
gradient, appends a node to the active :class:`Tape`.  :func:`backward`
walks that tape once, in strict reverse append order.

Kernels operate over the trailing axes and accept leading batch axes, so a
whole minibatch flows through one tape.  Elementwise kernels (add, sub, mul,
div) follow numpy broadcasting; the backward pass sums gradients back to the
input shape.
"""

from __future__ import annotations

import contextlib
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

GUARD_EPS = 1e-8
ARCCOS_CLAMP = 1.0 - 1e-6

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


class UnknownPrimitiveError(KeyError):
    pass


class BackwardError(RuntimeError):
    pass


class Tensor:
    """A float64 array plus an optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad", "tape", "node_id")

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def is_leaf(self) -> bool:
        return self.tape is None

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.values.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every path still goes through apply_primitive
    def __add__(self, other):
        return apply_primitive("add", [self, _as_tensor(other)])

    def __radd__(self, other):
        return apply_primitive("add", [_as_tensor(other), self])

    def __sub__(self, other):
        return apply_primitive("sub", [self, _as_tensor(other)])

    def __rsub__(self, other):
        return apply_primitive("sub", [_as_tensor(other), self])

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scalar_mul", [self], scale=float(other))
        return apply_primitive("mul", [self, _as_tensor(other)])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return apply_primitive("scalar_mul", [self], scale=1.0 / float(other))
        return apply_primitive("div", [self, _as_tensor(other)])

    def __matmul__(self, other):
        return apply_primitive("matmul", [self, other])

    def __neg__(self):
        return apply_primitive("scalar_mul", [self], scale=-1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: list[Tensor]
    output_shape: tuple[int, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


_state = threading.local()


def _active_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None or tape.consumed:
        tape = Tape()
        _state.tape = tape
    return tape


def new_tape() -> Tape:
    """Start a fresh tape for the current thread and return it."""
    _state.tape = Tape()
    return _state.tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


# ---------------------------------------------------------------------------
# kernels: each returns (output array, vjp) where vjp maps the output cotangent
# to one cotangent per input (None for inputs with no gradient path)
# ---------------------------------------------------------------------------


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shapes(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot combine shapes {a.shape} and {b.shape}") from None


def _k_add(x, y):
    _broadcast_shapes("add", x, y)
    return x + y, lambda g: (_unbroadcast(g, x.shape), _unbroadcast(g, y.shape))


def _k_sub(x, y):
    _broadcast_shapes("sub", x, y)
    return x - y, lambda g: (_unbroadcast(g, x.shape), _unbroadcast(-g, y.shape))


def _k_mul(x, y):
    _broadcast_shapes("mul", x, y)
    return x * y, lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape))


def _k_div(x, y):
    _broadcast_shapes("div", x, y)
    out = x / y
    return out, lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * out / y, y.shape))


def _k_scalar_mul(x, *, scale):
    return x * scale, lambda g: (g * scale,)


def _k_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # shared weight matrix: fold the batch axes into rows
        k, n = b.shape
        a2 = a.reshape(-1, k)

        def vjp_shared(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.T).reshape(a.shape), a2.T @ g2

        return (a2 @ b).reshape(*a.shape[:-1], n), vjp_shared

    def vjp(g):
        ga = g @ np.swapaxes(b, -1, -2)
        gb = np.swapaxes(a, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return a @ b, vjp


def _k_transpose(x):
    if x.ndim < 2:
        raise ShapeError(f"transpose: need at least 2 axes, got {x.shape}")
    return np.swapaxes(x, -1, -2), lambda g: (np.swapaxes(g, -1, -2),)


def _k_permute(x, *, axes):
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"permute: axes {axes} invalid for shape {x.shape}")
    inverse = tuple(np.argsort(axes))
    return np.transpose(x, axes), lambda g: (np.transpose(g, inverse),)


def _k_reshape(x, *, shape):
    shape = tuple(shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} has {x.size} entries, target {shape}")
    return x.reshape(shape), lambda g: (g.reshape(x.shape),)


def _k_row_softmax(x):
    # max subtraction keeps exp() finite
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    p = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        # J^T g = p * (g - <g, p>)
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return p, vjp


def _k_log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        p = np.exp(out)
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return out, vjp


def _k_layer_norm(x, gain, bias):
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: affine shapes {gain.shape}, {bias.shape} vs width {d}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + GUARD_EPS)
    xhat = xc * inv_std

    def vjp(g):
        # full gradient through mean and variance:
        # dx = inv_std * (gh - mean(gh) - xhat * mean(gh * xhat)), gh = g * gain
        gh = g * gain
        dx = inv_std * (
            gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return xhat * gain + bias, vjp


def _k_gelu(x):
    # tanh approximation
    x2 = x * x
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x2 * x)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner),)

    return out, vjp


def _k_embed_lookup(table, *, ids):
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embed_lookup: table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embed_lookup: ids outside [0, {table.shape[0]})")

    def vjp(g):
        out = np.zeros_like(table)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return table[ids], vjp


def _k_sum(x, *, axis=None):
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return np.asarray(x.sum(axis=axis)), vjp


def _k_mean(x, *, axis=None):
    n = x.size if axis is None else x.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.full(x.shape, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, x.shape).copy(),)

    return np.asarray(x.mean(axis=axis)), vjp


def _k_dot(a, b):
    # contraction over the last axis; leading axes are batch
    if a.shape != b.shape:
        raise ShapeError(f"dot: shapes differ, {a.shape} vs {b.shape}")
    return np.asarray((a * b).sum(axis=-1)), lambda g: (g[..., None] * b, g[..., None] * a)


def _k_l2_norm(x):
    # sqrt(|x|^2 + eps^2): finite value and gradient at the zero vector
    n = np.sqrt((x * x).sum(axis=-1) + GUARD_EPS**2)
    return n, lambda g: ((g / n)[..., None] * x,)


def _k_concat_rows(*xs):
    if not xs:
        raise ShapeError("concat_rows: no inputs")
    tail = xs[0].shape[1:]
    for x in xs:
        if x.ndim < 1 or x.shape[1:] != tail:
            raise ShapeError(f"concat_rows: trailing extents differ, {[x.shape for x in xs]}")
    splits = np.cumsum([x.shape[0] for x in xs])[:-1]
    return np.concatenate(xs, axis=0), lambda g: tuple(np.split(g, splits, axis=0))


def _k_slice_rows(x, *, start, stop, axis=0):
    if not (0 <= start < stop <= x.shape[axis]):
        raise ShapeError(f"slice_rows: [{start}, {stop}) outside axis of extent {x.shape[axis]}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def vjp(g):
        out = np.zeros_like(x)
        out[index] = g
        return (out,)

    return x[index].copy(), vjp


def _k_gather_rows(x, *, batch, pos):
    # x: (B, L, d) -> (N, d) with rows x[batch[i], pos[i]]
    batch = np.asarray(batch, dtype=np.int64)
    pos = np.asarray(pos, dtype=np.int64)
    if x.ndim != 3 or batch.shape != pos.shape:
        raise ShapeError(f"gather_rows: need (B, L, d) input and matched indices, got {x.shape}")

    def vjp(g):
        out = np.zeros_like(x)
        np.add.at(out, (batch, pos), g)
        return (out,)

    return x[batch, pos], vjp


def _k_pick(x, *, ids):
    # x[..., ids[...]] along the last axis
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"pick: ids shape {ids.shape} vs leading shape {x.shape[:-1]}")
    picked = np.take_along_axis(x, ids[..., None], axis=-1)[..., 0]

    def vjp(g):
        out = np.zeros_like(x)
        np.put_along_axis(out, ids[..., None], g[..., None], axis=-1)
        return (out,)

    return picked, vjp


def _k_causal_mask(x, *, fill=-1e9):
    # entries above the diagonal of the trailing (L, L) block are replaced
    L = x.shape[-1]
    if x.ndim < 2 or x.shape[-2] != L:
        raise ShapeError(f"causal_mask: trailing block must be square, got {x.shape}")
    upper = np.triu(np.ones((L, L), dtype=bool), k=1)
    out = np.where(upper, fill, x)
    return out, lambda g: (np.where(upper, 0.0, g),)


def _k_arccos(x):
    # exact angle forward; the derivative -1/sqrt(1-x^2) blows up at |x| = 1,
    # so it is only applied for |x| <= ARCCOS_CLAMP and zeroed beyond
    c = np.clip(x, -ARCCOS_CLAMP, ARCCOS_CLAMP)
    inside = np.abs(x) <= ARCCOS_CLAMP
    out = np.arccos(np.clip(x, -1.0, 1.0))
    return out, lambda g: (np.where(inside, -g / np.sqrt(1.0 - c * c), 0.0),)


PRIMITIVES: dict[str, Callable] = {
    "matmul": _k_matmul,
    "add": _k_add,
    "sub": _k_sub,
    "mul": _k_mul,
    "div": _k_div,
    "scalar_mul": _k_scalar_mul,
    "row_softmax": _k_row_softmax,
    "log_softmax": _k_log_softmax,
    "layer_norm": _k_layer_norm,
    "gelu": _k_gelu,
    "embed_lookup": _k_embed_lookup,
    "transpose": _k_transpose,
    "permute": _k_permute,
    "reshape": _k_reshape,
    "sum": _k_sum,
    "mean": _k_mean,
    "dot": _k_dot,
    "l2_norm": _k_l2_norm,
    "concat_rows": _k_concat_rows,
    "slice_rows": _k_slice_rows,
    "gather_rows": _k_gather_rows,
    "pick": _k_pick,
    "causal_mask": _k_causal_mask,
    "arccos": _k_arccos,
}


def apply_primitive(kind: str, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Evaluate kernel ``kind`` and record it on the tape if needed."""
    try:
        kernel = PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitiveError(f"unknown primitive {kind!r}") from None
    inputs = [_as_tensor(x) for x in inputs]
    values, vjp = kernel(*(x.values for x in inputs), **attrs)
    out = Tensor.__new__(Tensor)
    out.values = np.asarray(values, dtype=np.float64)
    out.grad = None
    out.tape = None
    out.node_id = None
    out.requires_grad = _grad_enabled() and any(x.requires_grad for x in inputs)
    if out.requires_grad:
        tape = _active_tape()
        for x in inputs:
            if x.tape is not None and x.tape is not tape:
                raise BackwardError(f"{kind}: input recorded on a different or consumed tape")
        out.tape = tape
        out.node_id = tape.record(Node(kind, list(inputs), out.values.shape, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that contributed to ``loss``.

    Leaf gradients accumulate across calls (zero them between steps); a tape
    can be walked only once.
    """
    if loss.values.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape is None:
        raise BackwardError("loss is not connected to any tape")
    tape = loss.tape
    if tape.consumed:
        raise BackwardError("tape already consumed by an earlier backward call")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones(loss.shape)}
    for idx in range(loss.node_id, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        for x, gx in zip(node.inputs, node.vjp(g)):
            if gx is None or not x.requires_grad:
                continue
            if x.tape is None:
                x.grad = gx.copy() if x.grad is None else x.grad + gx
            elif x.node_id in grads:
                grads[x.node_id] = grads[x.node_id] + gx
            else:
                grads[x.node_id] = gx
    # drop saved activations
    tape.nodes.clear()


def finite_difference_check(f: Callable[[], Tensor], params: Tensor, step: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` rebuilds the scalar loss from the current ``params.values``.  The
    error per coordinate is |analytic - numeric| / max(1, |analytic|).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params.grad = None
    params.requires_grad = True
    new_tape()
    loss = f()
    if not math.isfinite(loss.item()):
        raise FloatingPointError("non-finite evaluation at the unperturbed point")
    backward(loss)
    analytic = np.zeros(params.shape) if params.grad is None else params.grad.copy()
    params.grad = None

    numeric = np.zeros(params.shape)
    flat = params.values.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise FloatingPointError(f"non-finite evaluation at coordinate {i}")
            numeric.reshape(-1)[i] = (up - down) / (2 * step)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))
    return float(err.max()) if err.size else 0.0


# thin functional wrappers used by the model code


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def layer_norm(x, gain, bias):
    return apply_primitive("layer_norm", [x, gain, bias])


def gelu(x):
    return apply_primitive("gelu", [x])


def row_softmax(x):
    return apply_primitive("row_softmax", [x])


def log_softmax(x):
    return apply_primitive("log_softmax", [x])


def dot(a, b):
    return apply_primitive("dot", [a, b])


def l2_norm(x):
    return apply_primitive("l2_norm", [x])


def tsum(x, axis=None):
    return apply_primitive("sum", [x], axis=axis)


def tmean(x, axis=None):
    return apply_primitive("mean", [x], axis=axis)


def cosine(a, b):
    """Row-wise cosine similarity with guarded norms."""
    return apply_primitive("div", [dot(a, b), l2_norm(a) * l2_norm(b)])
