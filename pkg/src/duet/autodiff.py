"""Dense tensors with a define-by-run tape and reverse-mode gradients.

A `Tape` is active for the duration of one training step. Ops record a
(output, inputs, vjp) triple; `backward(loss)` walks the records in reverse
creation order, so every consumer of a value contributes its gradient before
the value's own record runs. Tensors built outside any tape are plain
immutable values and can be shared freely between threads.

Precision is a module-level default: float64 for verification work (so
finite-difference comparisons are meaningful), float32 for training.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DomainError, NonFiniteError, ShapeError

_state = threading.local()

_DEFAULT_DTYPE = np.float64
_FINITE_CHECKS = True


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ContractError("default dtype must be float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


def set_finite_checks(enabled: bool) -> None:
    global _FINITE_CHECKS
    _FINITE_CHECKS = bool(enabled)


@contextmanager
def precision(dtype, finite_checks: bool | None = None):
    """Temporarily switch the default dtype (and optionally the NaN guard)."""
    global _DEFAULT_DTYPE, _FINITE_CHECKS
    saved = (_DEFAULT_DTYPE, _FINITE_CHECKS)
    set_default_dtype(dtype)
    if finite_checks is not None:
        _FINITE_CHECKS = bool(finite_checks)
    try:
        yield
    finally:
        _DEFAULT_DTYPE, _FINITE_CHECKS = saved


class Tensor:
    """A dense array plus gradient metadata.

    `requires_grad` marks leaves (parameters). Outputs of recorded ops set it
    automatically when any input requires grad. After `backward`, `.grad`
    holds an array of identical shape for every tensor on the loss path.
    """

    __slots__ = ("values", "requires_grad", "grad", "_tape")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=_DEFAULT_DTYPE)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return self.values.item()

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Convenience operators; the module functions are the canonical API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(values) -> Tensor:
    return Tensor(values)


def parameter(values) -> Tensor:
    return Tensor(values, requires_grad=True)


class Tape:
    """Ordered record of one forward pass; consumed by a single backward."""

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], object]] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if getattr(_state, "tape", None) is not None:
            raise ContractError("a tape is already active on this thread")
        _state.tape = self
        return self

    def __exit__(self, *exc):
        _state.tape = None
        return False

    def __len__(self) -> int:
        return len(self._records)


def _active_tape() -> Tape | None:
    return getattr(_state, "tape", None)


def _finish(out_values: np.ndarray, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    """Wrap an op result, run the finite guard, and record on the active tape."""
    if _FINITE_CHECKS and not np.all(np.isfinite(out_values)):
        raise NonFiniteError("op produced NaN or Inf")
    out = Tensor.__new__(Tensor)
    out.values = out_values
    out.grad = None
    out._tape = None
    out.requires_grad = False
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape._records.append((out, inputs, vjp))
    return out


def backward(loss: Tensor) -> None:
    """Accumulate gradients of `loss` into `.grad` of every tensor on its path.

    The loss must be scalar and must have been produced under a tape; the
    tape is consumed, so a second backward needs a fresh forward pass.
    """
    if loss.values.ndim != 0:
        raise ContractError("backward requires a scalar loss")
    tape = loss._tape
    if tape is None or not tape._records:
        raise ContractError("loss is not attached to a non-empty tape")
    if tape.consumed:
        raise ContractError("tape already consumed; run a new forward pass")
    tape.consumed = True

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.values)}
    holders: dict[int, Tensor] = {id(loss): loss}
    for out, inputs, vjp in reversed(tape._records):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        out.grad = g
        for t, gi in zip(inputs, vjp(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                holders[key] = t
    for key, g in grads.items():
        holders[key].grad = g


# ---------------------------------------------------------------------------
# shape helpers


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _require_2d(t: Tensor, op: str) -> None:
    if t.values.ndim != 2:
        raise ShapeError(f"{op} expects a 2-d tensor, got shape {t.shape}")


# ---------------------------------------------------------------------------
# core ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values + b.values
    except ValueError as e:
        raise ShapeError(f"add: {e}") from None

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(g, b.values.shape)

    return _finish(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values - b.values
    except ValueError as e:
        raise ShapeError(f"sub: {e}") from None

    def vjp(g):
        return _unbroadcast(g, a.values.shape), _unbroadcast(-g, b.values.shape)

    return _finish(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.values * b.values
    except ValueError as e:
        raise ShapeError(f"mul: {e}") from None

    def vjp(g):
        return (
            _unbroadcast(g * b.values, a.values.shape),
            _unbroadcast(g * a.values, b.values.shape),
        )

    return _finish(out, (a, b), vjp)


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    c = float(c)
    out = a.values * c

    def vjp(g):
        return (g * c,)

    return _finish(out, (a,), vjp)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _require_2d(a, "matmul")
    _require_2d(b, "matmul")
    if a.values.shape[1] != b.values.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    out = a.values @ b.values
    av, bv = a.values, b.values

    def vjp(g):
        return g @ bv.T, av.T @ g

    return _finish(out, (a, b), vjp)


def transpose(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    _require_2d(a, "transpose")
    out = a.values.T.copy()

    def vjp(g):
        return (g.T,)

    return _finish(out, (a,), vjp)


def relu(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.maximum(a.values, 0.0)
    mask = a.values > 0.0

    def vjp(g):
        return (g * mask,)

    return _finish(out, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    # Stable in both tails.
    v = a.values
    out = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))), np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _finish(out, (a,), vjp)


def natural_log(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.values <= 0.0):
        raise DomainError("natural_log requires strictly positive input; clamp first")
    out = np.log(a.values)
    av = a.values

    def vjp(g):
        return (g / av,)

    return _finish(out, (a,), vjp)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values into [lo, hi]; gradient passes only where unclipped."""
    a = _as_tensor(a)
    out = np.clip(a.values, lo, hi)
    mask = (a.values > lo) & (a.values < hi)

    def vjp(g):
        return (g * mask,)

    return _finish(out, (a,), vjp)


def absolute(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = np.abs(a.values)
    sign = np.sign(a.values)

    def vjp(g):
        return (g * sign,)

    return _finish(out, (a,), vjp)


def reduce_sum(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    out = a.values.sum()
    shape = a.values.shape

    def vjp(g):
        return (np.broadcast_to(g, shape).astype(g.dtype, copy=False),)

    return _finish(np.asarray(out), (a,), vjp)


def reduce_mean(a: Tensor) -> Tensor:
    a = _as_tensor(a)
    n = a.values.size
    out = a.values.mean()
    shape = a.values.shape

    def vjp(g):
        return (np.broadcast_to(g / n, shape).astype(g.dtype, copy=False),)

    return _finish(np.asarray(out), (a,), vjp)


def row_softmax(x: Tensor, bias: Tensor | None = None, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis of a matrix, with optional additive bias.

    `mask` is a boolean array (True = excluded); masked entries come out as
    exactly 0 and receive zero gradient. A fully-masked row is an error.
    """
    x = _as_tensor(x)
    _require_2d(x, "row_softmax")
    inputs: tuple[Tensor, ...] = (x,)
    logits = x.values
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.values.shape != logits.shape:
            raise ShapeError(f"row_softmax bias {bias.shape} vs logits {x.shape}")
        logits = logits + bias.values
        inputs = (x, bias)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != logits.shape:
            raise ShapeError(f"row_softmax mask {mask.shape} vs logits {x.shape}")
        if np.any(mask.all(axis=1)):
            raise ContractError("row_softmax: a row is fully masked")
        logits = np.where(mask, -np.inf, logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    if mask is not None:
        e = np.where(mask, 0.0, e)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=1, keepdims=True)
        gl = out * (g - dot)
        if len(inputs) == 2:
            return gl, gl
        return (gl,)

    return _finish(out, inputs, vjp)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row to mean 0 / variance 1, then scale and shift."""
    x, gain, shift = _as_tensor(x), _as_tensor(gain), _as_tensor(shift)
    _require_2d(x, "layer_norm")
    d = x.values.shape[1]
    if gain.values.shape not in ((1, d), (d,)) or shift.values.shape not in ((1, d), (d,)):
        raise ShapeError("layer_norm gain/shift must have one row of the input width")
    mu = x.values.mean(axis=1, keepdims=True)
    var = x.values.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = (x.values - mu) * inv
    gv = gain.values.reshape(1, d)
    out = y * gv + shift.values.reshape(1, d)

    def vjp(g):
        dgain = (g * y).sum(axis=0).reshape(gain.values.shape)
        dshift = g.sum(axis=0).reshape(shift.values.shape)
        dy = g * gv
        dx = inv * (dy - dy.mean(axis=1, keepdims=True) - y * (dy * y).mean(axis=1, keepdims=True))
        return dx, dgain, dshift

    return _finish(out, (x, gain, shift), vjp)


def affine(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias with bias broadcast across rows."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    _require_2d(x, "affine")
    _require_2d(weight, "affine")
    if x.values.shape[1] != weight.values.shape[0]:
        raise ShapeError(f"affine: {x.shape} @ {weight.shape}")
    cols = weight.values.shape[1]
    if bias.values.shape not in ((1, cols), (cols,)):
        raise ShapeError(f"affine bias shape {bias.shape} does not fit width {cols}")
    out = x.values @ weight.values + bias.values.reshape(1, cols)
    xv, wv = x.values, weight.values

    def vjp(g):
        return g @ wv.T, xv.T @ g, g.sum(axis=0).reshape(bias.values.shape)

    return _finish(out, (x, weight, bias), vjp)


def embedding_lookup(table: Tensor, indices) -> Tensor:
    """Rows of `table` selected by integer indices; gradient scatters back."""
    table = _as_tensor(table)
    _require_2d(table, "embedding_lookup")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("embedding_lookup indices must be 1-d")
    if idx.size and (idx.min() < 0 or idx.max() >= table.values.shape[0]):
        raise ShapeError("embedding_lookup index out of range")
    out = table.values[idx]
    shape = table.values.shape

    def vjp(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, idx, g)
        return (gt,)

    return _finish(out, (table,), vjp)


def take_rows(x: Tensor, indices) -> Tensor:
    """Row gather from a matrix (same mechanics as embedding_lookup)."""
    return embedding_lookup(x, indices)


def take_row(x: Tensor, i: int) -> Tensor:
    return embedding_lookup(x, [i])


def concat_rows(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_rows needs at least one part")
    parts = [_as_tensor(p) for p in parts]
    for p in parts:
        _require_2d(p, "concat_rows")
    widths = {p.values.shape[1] for p in parts}
    if len(widths) > 1:
        raise ShapeError("concat_rows parts must share a column count")
    out = np.concatenate([p.values for p in parts], axis=0)
    sizes = [p.values.shape[0] for p in parts]

    def vjp(g):
        pieces = []
        at = 0
        for s in sizes:
            pieces.append(g[at : at + s])
            at += s
        return tuple(pieces)

    return _finish(out, tuple(parts), vjp)


def concat_cols(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise ContractError("concat_cols needs at least one part")
    parts = [_as_tensor(p) for p in parts]
    for p in parts:
        _require_2d(p, "concat_cols")
    heights = {p.values.shape[0] for p in parts}
    if len(heights) > 1:
        raise ShapeError("concat_cols parts must share a row count")
    out = np.concatenate([p.values for p in parts], axis=1)
    sizes = [p.values.shape[1] for p in parts]

    def vjp(g):
        pieces = []
        at = 0
        for s in sizes:
            pieces.append(g[:, at : at + s])
            at += s
        return tuple(pieces)

    return _finish(out, tuple(parts), vjp)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    _require_2d(x, "slice_cols")
    if not (0 <= start < stop <= x.values.shape[1]):
        raise ShapeError(f"slice_cols [{start}:{stop}] out of range for {x.shape}")
    out = x.values[:, start:stop].copy()
    shape = x.values.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[:, start:stop] = g
        return (gx,)

    return _finish(out, (x,), vjp)


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    _require_2d(x, "slice_rows")
    if not (0 <= start < stop <= x.values.shape[0]):
        raise ShapeError(f"slice_rows [{start}:{stop}] out of range for {x.shape}")
    return embedding_lookup(x, list(range(start, stop)))


def gather_rows(x: Tensor, col_indices) -> Tensor:
    """Pick one entry per row: out[i, 0] = x[i, col_indices[i]]."""
    x = _as_tensor(x)
    _require_2d(x, "gather_rows")
    idx = np.asarray(col_indices, dtype=np.int64)
    n, c = x.values.shape
    if idx.shape != (n,):
        raise ShapeError("gather_rows needs one column index per row")
    if idx.size and (idx.min() < 0 or idx.max() >= c):
        raise ShapeError("gather_rows column index out of range")
    rows = np.arange(n)
    out = x.values[rows, idx].reshape(n, 1)
    shape = x.values.shape

    def vjp(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[rows, idx] = g[:, 0]
        return (gx,)

    return _finish(out, (x,), vjp)
