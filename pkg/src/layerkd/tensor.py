"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active, and that touch at least
one tensor with ``requires_grad=True``, are appended to that tape in
execution order.  ``Tape.backward`` then walks the record once, in reverse.
Nothing is recorded outside a tape, which is how frozen models (the teacher)
are run without building a graph.

Binary ops require identical shapes.  The only implicit broadcasting is of a
trailing-axis parameter vector (``add_bias``, ``layer_norm``); anything else
needs an explicit ``reshape``.
"""

from __future__ import annotations

import struct
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    """Shapes do not satisfy an operation's contract."""


class TapeError(RuntimeError):
    """Misuse of the computation tape (non-scalar loss, reused tape, ...)."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf from finite inputs."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE, order="C", copy=True)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.require(arr, DTYPE, "C")
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def clone(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        t = Tensor._wrap(self.data.copy(), rg)
        t.name = self.name
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all of these route through the taped functions below
    def __add__(self, other):
        return add(self, _as_tensor(other, self.shape))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.shape))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, shape) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.full(shape, float(x)))


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


# ---------------------------------------------------------------------------
# tape


class _Entry:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


_local = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of differentiable ops executed under ``with tape:``.

    A tape can be backpropagated through exactly once; a second call raises
    :class:`TapeError`.  Gradients of leaf tensors (those created by the user
    with ``requires_grad=True``) are *added* to ``tensor.grad``, so callers
    zero them between optimisation steps.
    """

    def __init__(self):
        self.entries: list[_Entry] = []
        self._produced: set[int] = set()
        self.consumed = False

    def __enter__(self) -> "Tape":
        if self.consumed:
            raise TapeError("tape has already been backpropagated")
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward_fn) -> None:
        self.entries.append(_Entry(tuple(inputs), output, backward_fn))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        if self.consumed:
            raise TapeError("backward called twice on the same tape; record a new one")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise TapeError("loss was not produced on this tape")
        self.consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for entry in reversed(self.entries):
            g_out = grads.pop(id(entry.output), None)
            if g_out is None:
                continue
            in_grads = entry.backward_fn(g_out)
            for t, g in zip(entry.inputs, in_grads):
                if g is None or not t.requires_grad:
                    continue
                if id(t) in self._produced:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + g
                    else:
                        grads[key] = g
                else:
                    if t.grad is None:
                        t.grad = np.array(g, dtype=DTYPE, copy=True)
                    else:
                        t.grad += g
        self.entries.clear()


def backward(loss: Tensor, tape: Tape) -> None:
    tape.backward(loss)


def _out(arr: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite values produced by {backward_fn.__qualname__.split('.')[0]}")
    tape = _active_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        tape.record(inputs, out, backward_fn)
    return out


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same("add", a, b)

    def add_backward(g):
        return g, g

    return _out(a.data + b.data, (a, b), add_backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same("sub", a, b)

    def sub_backward(g):
        return g, -g

    return _out(a.data - b.data, (a, b), sub_backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same("mul", a, b)
    ad, bd = a.data, b.data

    def mul_backward(g):
        return g * bd, g * ad

    return _out(ad * bd, (a, b), mul_backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def scale_backward(g):
        return (g * c,)

    return _out(a.data * c, (a,), scale_backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[..., d] + b[d]``."""
    if b.ndim != 1 or x.shape[-1:] != b.shape:
        raise DimensionError(f"add_bias: bias {b.shape} does not match trailing axis of {x.shape}")

    def add_bias_backward(g):
        return g, g.reshape(-1, g.shape[-1]).sum(axis=0)

    return _out(x.data + b.data, (x, b), add_bias_backward)


def add_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Add a constant (non-differentiable) array broadcastable to ``x``."""
    c = np.asarray(c, dtype=DTYPE)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise DimensionError(f"add_const: {c.shape} does not broadcast onto {x.shape}")

    def add_const_backward(g):
        return (g,)

    return _out(x.data + c, (x,), add_const_backward)


def mul_const(x: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcastable to ``x``."""
    c = np.asarray(c, dtype=DTYPE)
    if np.broadcast_shapes(x.shape, c.shape) != x.shape:
        raise DimensionError(f"mul_const: {c.shape} does not broadcast onto {x.shape}")

    def mul_const_backward(g):
        return (g * c,)

    return _out(x.data * c, (x,), mul_const_backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def relu_backward(g):
        return (g * mask,)

    return _out(np.where(mask, x.data, 0.0), (x,), relu_backward)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    inner = _GELU_C * xd * (1.0 + 0.044715 * x2)
    th = np.tanh(inner)
    out = 0.5 * xd * (1.0 + th)

    def gelu_backward(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * d_inner),)

    return _out(out, (x,), gelu_backward)


# ---------------------------------------------------------------------------
# linear algebra and shape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def matmul_backward(g):
        return g @ bd.T, ad.T @ g

    return _out(ad @ bd, (a, b), matmul_backward)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched product ``[..., m, k] x [..., k, n]`` with identical leading axes."""
    if a.ndim < 3 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def bmm_backward(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return _out(ad @ bd, (a, b), bmm_backward)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc

    def reshape_backward(g):
        return (g.reshape(old),)

    return _out(out, (x,), reshape_backward)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))

    def transpose_backward(g):
        return (np.transpose(g, inv),)

    return _out(np.transpose(x.data, axes), (x,), transpose_backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``table[ids]``; ``ids`` is an integer array of any shape."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError("embedding ids must be integers")
    if table.ndim != 2:
        raise DimensionError(f"embedding table must be 2-D, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    n = table.shape[0]

    def embedding_backward(g):
        gt = np.zeros((n, g.shape[-1]))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _out(table.data[ids], (table,), embedding_backward)


# ---------------------------------------------------------------------------
# reductions


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape

    def sum_backward(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _out(np.asarray(x.data.sum()), (x,), sum_backward)


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    """Mean over all elements, or over one axis (which is removed)."""
    shape = x.shape
    if axis is None:
        n = x.size

        def mean_backward(g):
            return (np.broadcast_to(g / n, shape).copy(),)

        return _out(np.asarray(x.data.mean()), (x,), mean_backward)
    ax = axis % x.ndim
    n = shape[ax]

    def mean_axis_backward(g):
        return (np.broadcast_to(np.expand_dims(g, ax) / n, shape).copy(),)

    return _out(x.data.mean(axis=ax), (x,), mean_axis_backward)


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean over axis 1 of ``x[B, T, D]`` counting only positions where ``mask[B, T]`` is set."""
    mask = np.asarray(mask, dtype=DTYPE)
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise DimensionError(f"masked_mean: mask {mask.shape} does not match {x.shape}")
    counts = mask.sum(axis=1, keepdims=True)
    if np.any(counts == 0):
        raise DimensionError("masked_mean: a row has no unmasked positions")
    w = (mask / counts)[:, :, None]

    def masked_mean_backward(g):
        return (w * g[:, None, :],)

    return _out((x.data * w).sum(axis=1), (x,), masked_mean_backward)


# ---------------------------------------------------------------------------
# normalisation, softmax, losses


def _check_axis(x: Tensor, axis: int) -> int:
    if x.ndim == 0:
        raise DimensionError("softmax over a scalar")
    ax = axis % x.ndim
    if x.shape[ax] < 1:
        raise DimensionError("softmax over an empty axis")
    return ax


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(x, axis)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=ax, keepdims=True)

    def softmax_backward(g):
        return (p * (g - (g * p).sum(axis=ax, keepdims=True)),)

    return _out(p, (x,), softmax_backward)


def _log_softmax_np(z: np.ndarray, ax: int) -> np.ndarray:
    z = z - z.max(axis=ax, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=ax, keepdims=True))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    ax = _check_axis(x, axis)
    ls = _log_softmax_np(x.data, ax)
    p = np.exp(ls)

    def log_softmax_backward(g):
        return (g - p * g.sum(axis=ax, keepdims=True),)

    return _out(ls, (x,), log_softmax_backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, epsilon: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d < 1 or gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs input {x.shape}")
    if epsilon <= 0:
        raise ValueError("layer_norm epsilon must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + epsilon)
    xhat = xc * inv
    gd = gain.data

    def layer_norm_backward(g):
        flat_g = g.reshape(-1, d)
        d_gain = (flat_g * xhat.reshape(-1, d)).sum(axis=0)
        d_bias = flat_g.sum(axis=0)
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        return dx, d_gain, d_bias

    return _out(xhat * gd + bias.data, (x, gain, bias), layer_norm_backward)


def cross_entropy(logits: Tensor, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``softmax(logits)``.

    ``logits`` is ``[N, C]``; ``weights`` (optional, ``[N]``) turns the mean
    into a weighted average, e.g. to skip padding positions.
    """
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    n = logits.shape[0]
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=DTYPE)
    total = w.sum()
    if total <= 0:
        raise DimensionError("cross_entropy: no weighted targets")
    ls = _log_softmax_np(logits.data, 1)
    rows = np.arange(n)
    loss = -(w * ls[rows, targets]).sum() / total

    def cross_entropy_backward(g):
        d = np.exp(ls)
        d[rows, targets] -= 1.0
        return (d * (w / total)[:, None] * g,)

    return _out(np.asarray(loss), (logits,), cross_entropy_backward)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over every element."""
    _check_same("mse", a, b)
    diff = a.data - b.data
    n = diff.size

    def mse_backward(g):
        d = (2.0 / n) * diff * g
        return d, -d

    return _out(np.asarray((diff * diff).mean()), (a, b), mse_backward)


# ---------------------------------------------------------------------------
# serialisation
#
#   offset  size       field
#   0       8          magic b"KDTENSOR"
#   8       2          format version, uint16 little-endian (currently 1)
#   10      2          rank, uint16 little-endian
#   12      8 * rank   dims, uint64 little-endian
#   ...     8 * prod   data, float64 little-endian, row-major

MAGIC = b"KDTENSOR"
FORMAT_VERSION = 1


def tensor_to_bytes(t: Tensor | np.ndarray) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=DTYPE)
    header = MAGIC + struct.pack("<HH", FORMAT_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def tensor_from_bytes(buf: bytes, requires_grad: bool = False) -> Tensor:
    if buf[:8] != MAGIC:
        raise ValueError("not a serialized tensor (bad magic)")
    version, rank = struct.unpack_from("<HH", buf, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 12)
    offset = 12 + 8 * rank
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) != offset + 8 * n:
        raise ValueError(f"tensor payload has {len(buf) - offset} bytes, expected {8 * n}")
    arr = np.frombuffer(buf, dtype="<f8", count=n, offset=offset).reshape(shape)
    return Tensor._wrap(arr.astype(DTYPE, copy=True), requires_grad)


def save_tensor(t: Tensor, path) -> None:
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path, requires_grad: bool = False) -> Tensor:
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read(), requires_grad)


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
