"""Dense tensors with reverse-mode gradients recorded on an explicit tape.

Values are numpy arrays (float64 for gradient-checked paths, float32 for
training). Every differentiable operation computes its forward result
eagerly and, while a GradTape is active, appends one record holding the
output plus a vector-Jacobian pull per differentiable input. Backprop
replays records in strict reverse order, so each output's adjoint is fully
accumulated before its record is processed (a Wengert list).

The tape is single-owner: one training step opens one tape, records one
forward pass, and consumes it with grad(). Forward passes outside any
tape record nothing, which is what evaluation loops rely on.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

_state = threading.local()


def _active_tape():
    return getattr(_state, "tape", None)


def _mac_log():
    return getattr(_state, "mac_log", None)


class Tensor:
    """A dense array plus a flag marking it as a gradient target."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def copy(self) -> "Tensor":
        return Tensor(self.data.copy(), self.requires_grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Small amount of operator sugar; the named functions below do the work.
    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)


class GradTape:
    """Ordered record of primitive operations for one reverse sweep.

    Use as a context manager. Only one tape may be active per thread.
    """

    def __init__(self):
        self._records: list = []

    def __enter__(self) -> "GradTape":
        if _active_tape() is not None:
            raise ContractError("a GradTape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        if _active_tape() is self:
            _state.tape = None
        return False

    def __len__(self) -> int:
        return len(self._records)


def record_op(out: Tensor, pulls: Sequence[tuple]) -> None:
    """Append one primitive to the active tape.

    ``pulls`` pairs each differentiable input with a callable mapping the
    output adjoint to that input's adjoint contribution. Fused operations
    defined outside this module register themselves through this hook.
    """
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append((out, tuple(pulls)))


def grad(loss: Tensor, params: Iterable[Tensor]) -> list[Tensor]:
    """Reverse sweep: d(loss)/d(p) for each p, consuming the active tape.

    Parameters never reached by the loss get an exactly-zero gradient.
    The tape is cleared and deactivated afterwards.
    """
    tape = _active_tape()
    if tape is None:
        raise ContractError("grad() requires an active GradTape")
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")

    adjoints: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for out, pulls in reversed(tape._records):
        g = adjoints.pop(id(out), None)
        if g is None:
            continue
        for inp, pull in pulls:
            contrib = pull(g)
            key = id(inp)
            if key in adjoints:
                adjoints[key] = adjoints[key] + contrib
            else:
                adjoints[key] = contrib

    result = []
    for p in params:
        g = adjoints.get(id(p))
        result.append(Tensor(np.zeros_like(p.data) if g is None else g))
    tape._records.clear()
    if _active_tape() is tape:
        _state.tape = None
    return result


@contextmanager
def track_macs():
    """Log (tag, m, k, n) for every matmul executed inside the block.

    Yields the list itself; one matmul of an m-by-k with a k-by-n matrix
    contributes m*k*n multiply-accumulates.
    """
    prev = _mac_log()
    _state.mac_log = log = []
    try:
        yield log
    finally:
        _state.mac_log = prev


def _check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")


# ---------------------------------------------------------------------------
# Primitive operations
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor, tag: str | None = None) -> Tensor:
    """C = A @ B for 2-D operands, with gradients to both sides."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    log = _mac_log()
    if log is not None:
        log.append((tag, a.shape[0], a.shape[1], b.shape[1]))
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)
    pulls = []
    if a.requires_grad:
        pulls.append((a, lambda g, bd=b.data: g @ bd.T))
    if b.requires_grad:
        pulls.append((b, lambda g, ad=a.data: ad.T @ g))
    record_op(out, pulls)
    return out


def transpose(a: Tensor) -> Tensor:
    out = Tensor(a.data.T.copy(), a.requires_grad)
    if a.requires_grad:
        record_op(out, [(a, lambda g: g.T)])
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)
    pulls = []
    if a.requires_grad:
        pulls.append((a, lambda g: g))
    if b.requires_grad:
        pulls.append((b, lambda g: g))
    record_op(out, pulls)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)
    pulls = []
    if a.requires_grad:
        pulls.append((a, lambda g: g))
    if b.requires_grad:
        pulls.append((b, lambda g: -g))
    record_op(out, pulls)
    return out


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (not a gradient target)."""
    s = float(s)
    out = Tensor(a.data * s, a.requires_grad)
    if a.requires_grad:
        record_op(out, [(a, lambda g: g * s)])
    return out


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)
    pulls = []
    if a.requires_grad:
        pulls.append((a, lambda g, bd=b.data: g * bd))
    if b.requires_grad:
        pulls.append((b, lambda g, ad=a.data: g * ad))
    record_op(out, pulls)
    return out


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-n bias row to every row of an m-by-n matrix."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape}")
    out = Tensor(x.data + b.data, x.requires_grad or b.requires_grad)
    pulls = []
    if x.requires_grad:
        pulls.append((x, lambda g: g))
    if b.requires_grad:
        pulls.append((b, lambda g: g.sum(axis=0)))
    record_op(out, pulls)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0), x.requires_grad)
    if x.requires_grad:
        mask = x.data > 0
        record_op(out, [(x, lambda g: g * mask)])
    return out


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t, x.requires_grad)
    if x.requires_grad:
        record_op(out, [(x, lambda g: g * (1.0 - t * t))])
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(s, x.requires_grad)
    if x.requires_grad:
        record_op(out, [(x, lambda g: g * s * (1.0 - s))])
    return out


def softmax_axis(x: Tensor, axis: int) -> Tensor:
    """Stable softmax along one axis; slices along that axis sum to 1.

    The max of each slice is subtracted before exponentiation so the
    result is finite for any finite input.
    """
    if not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"softmax_axis: axis {axis} out of range for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s, x.requires_grad)
    if x.requires_grad:
        def pull(g, s=s, axis=axis):
            return s * (g - (g * s).sum(axis=axis, keepdims=True))
        record_op(out, [(x, pull)])
    return out


def normalize_sum_axis(x: Tensor, axis: int) -> Tensor:
    """Divide each slice along ``axis`` by its sum (weighted-mean weights)."""
    s = x.data.sum(axis=axis, keepdims=True)
    y = x.data / s
    out = Tensor(y, x.requires_grad)
    if x.requires_grad:
        def pull(g, y=y, s=s, axis=axis):
            return (g - (g * y).sum(axis=axis, keepdims=True)) / s
        record_op(out, [(x, pull)])
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each trailing-axis vector to mean 0, population variance 1.

    ``eps`` sits inside the square root; the affine transform
    gamma * xhat + beta broadcasts over leading axes.
    """
    d = x.shape[-1] if x.data.ndim else 0
    if gamma.data.shape != (d,) or beta.data.shape != (d,):
        raise DimensionError(
            f"layer_norm: gamma/beta shapes {gamma.shape}/{beta.shape} do not match last extent {d}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gamma.data * xhat + beta.data, x.requires_grad or gamma.requires_grad or beta.requires_grad)
    pulls = []
    if x.requires_grad:
        def pull_x(g, gamma_d=gamma.data, xhat=xhat, inv=inv, d=d):
            gh = g * gamma_d
            return inv * (gh - gh.mean(axis=-1, keepdims=True)
                          - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        pulls.append((x, pull_x))
    if gamma.requires_grad:
        lead = tuple(range(x.data.ndim - 1))
        pulls.append((gamma, lambda g, xhat=xhat, lead=lead: (g * xhat).sum(axis=lead)))
    if beta.requires_grad:
        lead = tuple(range(x.data.ndim - 1))
        pulls.append((beta, lambda g, lead=lead: g.sum(axis=lead)))
    record_op(out, pulls)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum()), x.requires_grad)
    if x.requires_grad:
        record_op(out, [(x, lambda g, shape=x.data.shape: np.broadcast_to(g, shape).copy())])
    return out


def mean_axis(x: Tensor, axis: int = 0) -> Tensor:
    n = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis), x.requires_grad)
    if x.requires_grad:
        def pull(g, axis=axis, n=n):
            return np.expand_dims(g, axis).repeat(n, axis=axis) / n
        record_op(out, [(x, pull)])
    return out


def max_axis(x: Tensor, axis: int = 0) -> Tensor:
    """Elementwise maximum along one axis; the first maximal entry takes the gradient."""
    idx = x.data.argmax(axis=axis)
    out = Tensor(x.data.max(axis=axis), x.requires_grad)
    if x.requires_grad:
        def pull(g, idx=idx, axis=axis, shape=x.data.shape):
            full = np.zeros(shape, dtype=g.dtype)
            grid = np.indices(idx.shape)
            pos = list(grid)
            pos.insert(axis if axis >= 0 else axis + len(shape), idx)
            full[tuple(pos)] = g
            return full
        record_op(out, [(x, pull)])
    return out


def concat_cols(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 1."""
    rows = tensors[0].shape[0]
    if any(t.data.ndim != 2 or t.shape[0] != rows for t in tensors):
        raise DimensionError("concat_cols: all operands must be 2-D with equal row counts")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1),
                 any(t.requires_grad for t in tensors))
    pulls = []
    offset = 0
    for t in tensors:
        w = t.shape[1]
        if t.requires_grad:
            pulls.append((t, lambda g, o=offset, w=w: g[:, o:o + w]))
        offset += w
    record_op(out, pulls)
    return out


def reshape(x: Tensor, shape: tuple) -> Tensor:
    out = Tensor(x.data.reshape(shape), x.requires_grad)
    if x.requires_grad:
        record_op(out, [(x, lambda g, s=x.data.shape: g.reshape(s))])
    return out
