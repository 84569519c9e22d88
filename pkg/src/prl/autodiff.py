"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every differentiable op appends an entry to a module-level
tape; ``backward(loss)`` replays the tape in reverse and accumulates
gradients into every tensor with ``requires_grad``. The op set is exactly
what the model stack needs (matmul, elementwise add/mul, sigmoid, tanh,
concat, slice, embedding lookup, softmax cross-entropy, masked MSE, plus
small shape plumbing); there is no general broadcasting.

Gradients accumulate across backward passes until ``zero_grad`` is called.
A single backward pass consumes the tape. Everything is single-threaded.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "constant",
    "no_grad",
    "is_grad_enabled",
    "set_debug_checks",
    "backward",
    "zero_grad",
    "matmul",
    "add",
    "add_bias",
    "mul",
    "sigmoid",
    "tanh",
    "concat",
    "slice_axis",
    "embedding_lookup",
    "softmax_cross_entropy",
    "mse_loss",
    "tensor_sum",
    "transpose2d",
    "reshape",
    "swap01",
    "softmax",
    "log_softmax",
    "grad_check",
    "GradCheckReport",
]

_TAPE: list[tuple["Tensor", object]] = []
_GRAD_ENABLED = True
_DEBUG_CHECKS = False


class Tensor:
    """Dense float64 array with an optional accumulated gradient."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


@contextmanager
def no_grad():
    """Disable tape recording; ops inside produce detached tensors."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug_checks(enabled: bool) -> None:
    """When on, every committed op asserts its output is finite."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


def _finalize(out: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Register the backward rule for out if anything upstream needs grads."""
    if _DEBUG_CHECKS and not np.isfinite(out.data).all():
        raise NumericError("operation produced non-finite values")
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPE.append((out, backward_fn))
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = g.astype(np.float64, copy=True)
    else:
        t.grad += g


def _ensure_grad(t: Tensor) -> np.ndarray:
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    return t.grad


def backward(loss: Tensor) -> None:
    """Run the tape backwards from a scalar loss; the tape is consumed."""
    if loss.data.shape != ():
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    global _TAPE
    tape, _TAPE = _TAPE, []
    _accum(loss, np.ones((), dtype=np.float64))
    for out, fn in reversed(tape):
        if out.grad is not None:
            fn(out.grad)


def tape_size() -> int:
    return len(_TAPE)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"matmul shapes incompatible: {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data)

    def _bwd(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _finalize(out, (a, b), _bwd)


def _binary_shapes(a: Tensor, b: Tensor, name: str):
    # equal shapes, or one side a scalar; no other broadcasting
    if a.data.shape == b.data.shape:
        return
    if a.data.shape == () or b.data.shape == ():
        return
    raise DimensionError(f"{name} shapes incompatible: {a.data.shape} vs {b.data.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "add")
    out = Tensor(a.data + b.data)

    def _bwd(g):
        if a.requires_grad:
            _accum(a, g if a.data.shape == g.shape else g.sum())
        if b.requires_grad:
            _accum(b, g if b.data.shape == g.shape else g.sum())

    return _finalize(out, (a, b), _bwd)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1-D bias along the last axis of a 2-D tensor."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise DimensionError(f"add_bias shapes incompatible: {x.data.shape} + {b.data.shape}")
    out = Tensor(x.data + b.data)

    def _bwd(g):
        if x.requires_grad:
            _accum(x, g)
        if b.requires_grad:
            _accum(b, g.sum(axis=0))

    return _finalize(out, (x, b), _bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_shapes(a, b, "mul")
    out = Tensor(a.data * b.data)

    def _bwd(g):
        if a.requires_grad:
            ga = g * b.data
            _accum(a, ga if a.data.shape == ga.shape else ga.sum())
        if b.requires_grad:
            gb = g * a.data
            _accum(b, gb if b.data.shape == gb.shape else gb.sum())

    return _finalize(out, (a, b), _bwd)


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(expit(x.data))

    def _bwd(g):
        _accum(x, g * out.data * (1.0 - out.data))

    return _finalize(out, (x,), _bwd)


def tanh(x: Tensor) -> Tensor:
    out = Tensor(np.tanh(x.data))

    def _bwd(g):
        _accum(x, g * (1.0 - out.data * out.data))

    return _finalize(out, (x,), _bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along axis; all non-axis dimensions must agree."""
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat of no tensors")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(s[d] != ref[d] for d in range(len(ref)) if d != axis):
            raise DimensionError(f"concat non-axis dims differ: {ref} vs {s} on axis {axis}")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, g[tuple(idx)])

    return _finalize(out, tuple(tensors), _bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy())

    def _bwd(g):
        _ensure_grad(x)[idx] += g

    return _finalize(out, (x,), _bwd)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Gather rows of table; gradient scatter-adds (repeated ids accumulate)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"embedding ids must be 1-D, got shape {ids.shape}")
    n_rows = table.data.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n_rows):
        bad = ids[(ids < 0) | (ids >= n_rows)][0]
        raise IndexError(f"embedding id {bad} out of range [0, {n_rows})")
    out = Tensor(table.data[ids])

    def _bwd(g):
        np.add.at(_ensure_grad(table), ids, g)

    return _finalize(out, (table,), _bwd)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax on a plain array (no tape)."""
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer targets under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2 or targets.ndim != 1 or targets.shape[0] != logits.data.shape[0]:
        raise DimensionError(
            f"cross-entropy shapes incompatible: logits {logits.data.shape}, targets {targets.shape}"
        )
    n, c = logits.data.shape
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        bad = targets[(targets < 0) | (targets >= c)][0]
        raise IndexError(f"cross-entropy target {bad} out of range [0, {c})")
    logp = log_softmax(logits.data, axis=1)
    rows = np.arange(n)
    out = Tensor(-logp[rows, targets].mean())

    def _bwd(g):
        grad = np.exp(logp)
        grad[rows, targets] -= 1.0
        grad *= float(g) / n
        _accum(logits, grad)

    return _finalize(out, (logits,), _bwd)


def mse_loss(pred: Tensor, target, row_mask=None) -> Tensor:
    """Mean squared error against a constant target.

    row_mask, when given, is a boolean vector over axis 0; masked-out rows
    contribute nothing and are excluded from the denominator. The mean is
    over supervised *entries* (rows kept x row width).
    """
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise DimensionError(f"mse shapes differ: {pred.data.shape} vs {target.shape}")
    diff = pred.data - target
    if row_mask is not None:
        row_mask = np.asarray(row_mask, dtype=bool)
        if row_mask.shape != (pred.data.shape[0],):
            raise DimensionError(
                f"mse row_mask shape {row_mask.shape} does not match rows {pred.data.shape[0]}"
            )
        diff = diff * row_mask[:, None] if diff.ndim == 2 else diff * row_mask
        n = int(row_mask.sum()) * int(np.prod(pred.data.shape[1:], dtype=np.int64))
    else:
        n = pred.data.size
    if n == 0:
        raise DimensionError("mse over zero supervised entries")
    out = Tensor(np.float64((diff * diff).sum() / n))

    def _bwd(g):
        _accum(pred, (2.0 / n) * float(g) * diff)

    return _finalize(out, (pred,), _bwd)


def tensor_sum(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def _bwd(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _finalize(out, (x,), _bwd)


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose2d needs a 2-D tensor, got {x.data.shape}")
    out = Tensor(np.ascontiguousarray(x.data.T))

    def _bwd(g):
        _accum(x, g.T)

    return _finalize(out, (x,), _bwd)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def _bwd(g):
        _accum(x, g.reshape(x.data.shape))

    return _finalize(out, (x,), _bwd)


def swap01(x: Tensor) -> Tensor:
    """Swap the first two axes (batch-major <-> time-major)."""
    out = Tensor(np.ascontiguousarray(np.swapaxes(x.data, 0, 1)))

    def _bwd(g):
        _accum(x, np.swapaxes(g, 0, 1))

    return _finalize(out, (x,), _bwd)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Result of comparing analytic gradients to central differences."""

    max_rel_err: float
    tolerance: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


def grad_check(f, xs, step: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients of scalar f against central differences.

    f receives the tensor (or list of tensors) and must return a scalar
    Tensor; it must be deterministic. Relative error per element is
    |a - n| / max(1, |a|, |n|).
    """
    single = isinstance(xs, Tensor)
    inputs = [xs] if single else list(xs)
    for x in inputs:
        x.requires_grad = True
        x.grad = None

    loss = f(xs if single else inputs)
    backward(loss)
    analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in inputs]
    for x in inputs:
        x.grad = None

    def eval_loss() -> float:
        with no_grad():
            return float(f(xs if single else inputs).data)

    per_input = []
    for x, a in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = eval_loss()
            flat[i] = orig - step
            fm = eval_loss()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            ai = a.reshape(-1)[i]
            rel = abs(ai - numeric) / max(1.0, abs(ai), abs(numeric))
            worst = max(worst, rel)
        per_input.append(worst)

    return GradCheckReport(max_rel_err=max(per_input, default=0.0), tolerance=tolerance, per_input=per_input)
