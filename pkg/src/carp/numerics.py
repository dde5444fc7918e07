"""A small dense-tensor engine with define-by-run reverse-mode autodiff.

Tensors wrap numpy arrays. Operations are recorded on the innermost active
:class:`Tape`; outside of any tape nothing is recorded, which is how no-grad
evaluation works::

    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)      # w.grad now holds d loss / d w

Gradients accumulate into ``.grad`` of leaf tensors until :func:`zero_grad`.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from carp.errors import DataError, DegenerateInputError, DimensionError, NumericError

DEFAULT_DTYPE = np.float32
LAYER_NORM_EPS = 1e-5
L2_EPS = 1e-8
CHECKPOINT_FORMAT = "carp-params/1"

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """An n-d float array, optionally tracked for gradients."""

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> Tensor:
        return transpose(self, axes or None)

    @property
    def T(self) -> Tensor:
        return transpose(self, None)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of operations executed while the tape is active."""

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> Tape:
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        assert stack and stack[-1] is self
        stack.pop()

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def activation_elements(self) -> int:
        return sum(node.output.data.size for node in self.nodes)

    def record(self, node: Node) -> None:
        node.output._node = node
        node.output._tape = self
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Propagate d loss / d x into ``.grad`` of every reachable leaf.

        The tape is kept, so calling this twice doubles the leaf gradients.
        """
        if loss.data.size != 1 or loss.ndim > 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise ValueError("loss was not produced on this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
                else:
                    key = id(inp)
                    grads[key] = gi if key not in grads else grads[key] + gi


class no_grad:
    """Context in which no operation is recorded, even inside a tape."""

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()


def backward(loss: Tensor) -> None:
    tape = loss._tape
    if tape is None:
        raise ValueError("loss was not recorded on any tape")
    tape.backward(loss)


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(Node(op, inputs, out, bwd))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _operands(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(f"{op}: cannot broadcast {a.shape} with {b.shape}") from exc


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast("add", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit("add", a.data + b.data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast("sub", a, b)

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _emit("sub", a.data - b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _check_broadcast("mul", a, b)

    def bwd(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _emit("mul", a.data * b.data, (a, b), bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _emit("exp", y, (x,), lambda g: (g * y,))


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))
    y = 0.5 * xd * (1.0 + t)

    def bwd(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return _emit("gelu", y, (x,), bwd)


# shape -----------------------------------------------------------------------


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        y = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _emit("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    try:
        y = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", y, tensors, bwd)


# reductions ------------------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", np.asarray(y), (x,), bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# linear algebra --------------------------------------------------------------


def _swap(m: np.ndarray) -> np.ndarray:
    return np.swapaxes(m, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        y = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc

    def bwd(g):
        da = _unbroadcast(np.matmul(g, _swap(b.data)), a.shape) if a.requires_grad else None
        db = _unbroadcast(np.matmul(_swap(a.data), g), b.shape) if b.requires_grad else None
        return da, db

    return _emit("matmul", y, (a, b), bwd)


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (V x d) at integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError(f"token id out of range for table with {table.shape[0]} rows")

    def bwd(g):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (dt,)

    return _emit("embedding", table.data[ids], (table,), bwd)


# normalisation and pooling ---------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", y, (x,), bwd)


def softmax_rows(x: Tensor) -> Tensor:
    return softmax(x, axis=-1)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    if eps <= 0:
        raise ValueError("eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias must have shape ({d},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv = 1.0 / np.sqrt((centered**2).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv
    y = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def bwd(g):
        dxhat = g * gain.data
        dx = inv * (
            dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layer_norm", y, (x, gain, bias), bwd)


def masked_sum(x: Tensor, mask) -> Tensor:
    """Sum token vectors ``x`` (b x t x d) over positions where ``mask`` (b x t) is 1."""
    m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
    if x.ndim != 3 or m.shape != x.shape[:2]:
        raise DimensionError(f"masked_sum: mask {m.shape} does not match tokens {x.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("masked_sum: mask entries must be 0 or 1")
    if (m.sum(axis=1) == 0).any():
        raise DegenerateInputError("masked_sum: a row has no unmasked positions")
    m = m.astype(x.dtype)
    y = np.einsum("btd,bt->bd", x.data, m)
    return _emit("masked_sum", y, (x,), lambda g: (g[:, None, :] * m[:, :, None],))


def l2_normalize(x: Tensor, eps: float = L2_EPS) -> Tensor:
    """Scale each row of ``x`` to unit Euclidean norm.

    Rows with norm below ``eps`` have no direction and raise
    :class:`DegenerateInputError`.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    norm = np.sqrt((x.data**2).sum(axis=-1, keepdims=True))
    if (norm < eps).any():
        raise DegenerateInputError("l2_normalize: zero-norm row")
    y = x.data / norm

    def bwd(g):
        return ((g - y * (g * y).sum(axis=-1, keepdims=True)) / norm,)

    return _emit("l2_normalize", y, (x,), bwd)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[i, targets[i]]``."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError("cross_entropy_rows expects m x n logits and m targets")
    m, n = logits.shape
    if targets.size and (targets.min() < 0 or targets.max() >= n):
        raise IndexError("target index out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    rows = np.arange(m)
    loss = np.asarray((lse - z[rows, targets]).mean(), dtype=z.dtype)

    def bwd(g):
        p = np.exp(z - lse[:, None])
        p[rows, targets] -= 1.0
        return (p * (g / m),)

    return _emit("cross_entropy_rows", loss, (logits,), bwd)


# finite-difference audit -----------------------------------------------------


@dataclass
class GradCheck:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def max_abs_error(self) -> float:
        return float(np.max(np.abs(self.analytic - self.numeric), initial=0.0))

    def relative_error(self) -> float:
        """Worst elementwise error measured against the gradient's own scale."""
        scale = max(float(np.max(np.abs(self.numeric), initial=0.0)), 1e-12)
        return self.max_abs_error / scale

    def ok(self, rtol: float, atol: float = 1e-8) -> bool:
        # |a - n| <= rtol * (|n| + max|n|) + atol; atol covers gradients that are exactly zero
        scale = float(np.max(np.abs(self.numeric), initial=0.0))
        return bool(np.all(np.abs(self.analytic - self.numeric) <= rtol * (np.abs(self.numeric) + scale) + atol))


def check_gradients(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    h: float = 1e-3,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[GradCheck]:
    """Compare tape gradients of ``fn()`` against central finite differences.

    ``fn`` must rebuild its computation from ``params`` on every call. With
    ``max_entries`` set, only that many randomly chosen entries per parameter
    are perturbed (the rest of the numeric array is copied from the analytic
    one so they compare equal).
    """
    for p in params.values():
        p.grad = None
        p.requires_grad = True
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    results = []
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        numeric = analytic.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        num_flat = numeric.reshape(-1)
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = fn().item()
                flat[i] = orig - h
                down = fn().item()
                flat[i] = orig
                num_flat[i] = (up - down) / (2 * h)
        results.append(GradCheck(name, analytic, numeric))
        p.grad = None
    return results


# checkpoints -----------------------------------------------------------------


def save_params(path: str | Path, params: Mapping[str, Tensor | np.ndarray]) -> None:
    """Write named arrays to a versioned ``.npz`` container."""
    arrays = {name: np.asarray(p.data if isinstance(p, Tensor) else p) for name, p in params.items()}
    if "__format__" in arrays:
        raise ValueError("'__format__' is a reserved parameter name")
    with open(path, "wb") as fh:
        np.savez(fh, __format__=np.array(CHECKPOINT_FORMAT), **arrays)


def load_params(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as npz:
        if "__format__" not in npz.files or str(npz["__format__"]) != CHECKPOINT_FORMAT:
            raise DataError(f"{path}: not a {CHECKPOINT_FORMAT} parameter file")
        return {name: npz[name] for name in npz.files if name != "__format__"}
