"""Dense float64 tensors with a tape-based reverse-mode differentiator.

Operations record themselves on the tape that is active in the current thread
(see :class:`Tape`). Outside a tape, operations are plain numpy evaluations.
Every op accepts an optional leading batch axis; convolution layouts are
``(..., channels, height, width)``.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

_local = threading.local()


class Tensor:
    """A float64 array with an optional gradient slot.

    Leaf tensors (parameters, inputs) have ``node is None``. Tensors produced
    by a recorded op carry the index of their record on the owning tape.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self.node: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operator sugar, all routed through the recorded ops below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Record:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of differentiable operations.

    Use as a context manager; ops evaluated inside the ``with`` block are
    recorded here. Tapes nest per thread, and each thread has its own stack.
    """

    def __init__(self):
        self.records: list[Record] = []

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, kind, inputs, output, backward_fn) -> None:
        output.requires_grad = True
        output.node = len(self.records)
        self.records.append(Record(kind, tuple(inputs), output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def _register(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        tape.record(kind, inputs, out, backward_fn)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss)/d(leaf) into the ``grad`` slot of every leaf that requires it.

    Leaf gradients accumulate, so call :func:`zero_grad` between steps.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None or loss.node >= len(tape.records) or tape.records[loss.node].output is not loss:
        raise ValueError("loss was not produced on this tape")
    pending: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
    for idx in range(loss.node, -1, -1):
        g = pending.pop(idx, None)
        if g is None:
            continue
        rec = tape.records[idx]
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.node is None:
                if inp.grad is None:
                    inp.grad = np.array(gi, dtype=np.float64)
                else:
                    inp.grad += gi
            elif inp.node in pending:
                pending[inp.node] = pending[inp.node] + gi
            else:
                pending[inp.node] = gi


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# elementwise


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _register("add", (a, b), a.data + b.data, lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _register("sub", (a, b), a.data - b.data, lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting.

    The attention case ``(c, h, w) * (1, h, w)`` broadcasts the single-channel
    weight map across every feature channel without copying it.
    """
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data

    def back(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _register("mul", (a, b), ad * bd, back)


def scale(a: Tensor, s: float) -> Tensor:
    return _register("scale", (a,), a.data * s, lambda g: (g * s,))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _register("add_scalar", (a,), a.data + c, lambda g: (g,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument never overflows; exact 0.5 at x = 0
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _sigmoid_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return g * y * (1.0 - y)


def _tanh_backward(g: np.ndarray, y: np.ndarray) -> np.ndarray:
    return g * (1.0 - y * y)


def _relu_backward(g: np.ndarray, x: np.ndarray) -> np.ndarray:
    return g * (x > 0)


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _register("sigmoid", (x,), y, lambda g: (_sigmoid_backward(g, y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _register("tanh", (x,), y, lambda g: (_tanh_backward(g, y),))


def relu(x: Tensor) -> Tensor:
    xd = x.data
    return _register("relu", (x,), np.maximum(xd, 0.0), lambda g: (_relu_backward(g, xd),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *operands, factor: float | None = None) -> Tensor:
    """Dispatch by name: sigmoid, tanh, relu, add, sub, mul, scale."""
    if op in _UNARY:
        (x,) = operands
        return _UNARY[op](x)
    if op in _BINARY:
        a, b = operands
        return _BINARY[op](a, b)
    if op == "scale":
        (x,) = operands
        return scale(x, float(factor))
    raise ValueError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# reductions and shape ops


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _register("sum", (x,), np.asarray(x.data.sum()), lambda g: (np.broadcast_to(g, shape),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _register("mean", (x,), np.asarray(x.data.mean()), lambda g: (np.broadcast_to(g / n, shape),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _register("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def flatten(x: Tensor, start: int = 1) -> Tensor:
    """Collapse every axis from ``start`` onward."""
    return reshape(x, x.shape[:start] + (-1,))


def getitem(x: Tensor, key) -> Tensor:
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        if _has_fancy(key):
            np.add.at(out, key, g)
        else:
            out[key] = g
        return (out,)

    return _register("getitem", (x,), x.data[key], back)


def _has_fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    ndim = datas[0].ndim
    ax = axis % ndim
    for d in datas[1:]:
        if d.ndim != ndim or d.shape[:ax] + d.shape[ax + 1:] != datas[0].shape[:ax] + datas[0].shape[ax + 1:]:
            raise ValueError(f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}")
    bounds = np.cumsum([d.shape[ax] for d in datas])[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _register("concat", tuple(tensors), np.concatenate(datas, axis=ax), back)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``a`` then ``b`` along the channel axis (third from last)."""
    if a.ndim < 3 or b.ndim < 3 or a.shape[-2:] != b.shape[-2:]:
        raise ValueError(f"concat_channels: spatial shapes differ, {a.shape} vs {b.shape}")
    return concat([a, b], axis=-3)


# ---------------------------------------------------------------------------
# linear layers


def fully_connected(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``y = weight @ x + bias`` on the last axis of ``x``."""
    q, p = weight.shape
    if x.shape[-1] != p or bias.shape != (q,):
        raise ValueError(f"fully_connected: x {x.shape}, weight {weight.shape}, bias {bias.shape}")
    xd, wd = x.data, weight.data

    def back(g):
        g2 = g.reshape(-1, q)
        return g @ wd, g2.T @ xd.reshape(-1, p), g2.sum(axis=0)

    return _register("fully_connected", (x, weight, bias), xd @ wd.T + bias.data, back)


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """``(B, C, H, W)`` -> ``(kh*kw*C, B*H*W)`` with rows ordered (dy, dx, c)."""
    b, c, h, w = x.shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    xp = np.zeros((c, b, h + 2 * ph, w + 2 * pw))
    xp[:, :, ph:ph + h, pw:pw + w] = x.transpose(1, 0, 2, 3)
    cols = np.empty((kh, kw, c, b, h, w))
    for dy in range(kh):
        for dx in range(kw):
            cols[dy, dx] = xp[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(kh * kw * c, b * h * w)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], kh: int, kw: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back onto a ``(B, C, H, W)`` grid."""
    b, c, h, w = shape
    ph, pw = (kh - 1) // 2, (kw - 1) // 2
    cols = cols.reshape(kh, kw, c, b, h, w)
    xp = np.zeros((c, b, h + 2 * ph, w + 2 * pw))
    for dy in range(kh):
        for dx in range(kw):
            xp[:, :, dy:dy + h, dx:dx + w] += cols[dy, dx]
    return np.ascontiguousarray(xp[:, :, ph:ph + h, pw:pw + w].transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    ``x`` is ``(c_in, h, w)`` or ``(batch, c_in, h, w)``; ``kernel`` is
    ``(c_out, c_in, kh, kw)`` with odd ``kh``, ``kw``.
    """
    if kernel.ndim != 4 or x.ndim not in (3, 4):
        raise ValueError(f"conv2d: bad ranks, x {x.shape}, kernel {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if x.shape[-3] != c_in:
        raise ValueError(f"conv2d: input has {x.shape[-3]} channels, kernel expects {c_in}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel must have odd size, got {kh}x{kw}")
    if bias.shape != (c_out,):
        raise ValueError(f"conv2d: bias {bias.shape} does not match {c_out} filters")
    unbatched = x.ndim == 3
    xd = x.data[None] if unbatched else x.data
    b, _, h, w = xd.shape
    cols = _im2col(xd, kh, kw)
    k2 = kernel.data.transpose(0, 2, 3, 1).reshape(c_out, -1)
    out = (k2 @ cols).reshape(c_out, b, h, w).transpose(1, 0, 2, 3) + bias.data[:, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        g2 = (g[None] if unbatched else g).transpose(1, 0, 2, 3).reshape(c_out, -1)
        gx = _col2im(k2.T @ g2, xd.shape, kh, kw)
        gk = (g2 @ cols.T).reshape(c_out, kh, kw, c_in).transpose(0, 3, 1, 2)
        return (gx[0] if unbatched else gx), gk, g2.sum(axis=1)

    return _register("conv2d", (x, kernel, bias), out[0] if unbatched else out, back)


# ---------------------------------------------------------------------------
# verification


def finite_difference_gradient(
    f: Callable[[], float],
    params: Sequence[Tensor],
    step: float = 1e-5,
    coords: Sequence[np.ndarray | None] | None = None,
) -> list[np.ndarray]:
    """Central differences of ``f`` w.r.t. each tensor in ``params``.

    ``f`` is re-evaluated after perturbing ``param.data`` in place, so it must
    read parameters at call time. ``coords`` optionally restricts each tensor to
    a subset of flat indices; unvisited entries are returned as NaN.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    grads = []
    for i, p in enumerate(params):
        flat = p.data.reshape(-1)
        idx = range(flat.size) if coords is None or coords[i] is None else coords[i]
        g = np.full(flat.size, np.nan) if coords is not None and coords[i] is not None else np.zeros(flat.size)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + step
            hi = f()
            flat[j] = orig - step
            lo = f()
            flat[j] = orig
            g[j] = (hi - lo) / (2.0 * step)
        grads.append(g.reshape(p.shape))
    return grads
