"""Label traces: per-tag exponentially discounted counts of observed labels.

The trace after observing labels y_1..y_t is
    T_t[y] = sum_{k=1..t} gamma^(t-k) * 1(y_k == y),
computed recursively as T_t = gamma * T_{t-1} + onehot(y_t). The model
consumes the trace *before* each position, so the vector fed alongside
word w_t covers y_1..y_{t-1} only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

__all__ = [
    "LabelTraceState",
    "trace_init",
    "trace_update",
    "trace_from_sequence",
    "trace_closed_form",
    "batch_trace_update",
]


@dataclass(frozen=True)
class LabelTraceState:
    """Immutable trace vector over K labels with its discount."""

    t: np.ndarray
    gamma: float

    @property
    def num_labels(self) -> int:
        return self.t.shape[0]


def _check_gamma(gamma: float) -> float:
    gamma = float(gamma)
    if not (0.0 <= gamma <= 1.0):
        raise ValidationError(f"trace discount must lie in [0, 1], got {gamma}")
    return gamma


def trace_init(num_labels: int, gamma: float) -> LabelTraceState:
    if num_labels < 1:
        raise ValidationError(f"need at least one label, got {num_labels}")
    return LabelTraceState(t=np.zeros(num_labels, dtype=np.float64), gamma=_check_gamma(gamma))


def trace_update(state: LabelTraceState, label: int) -> LabelTraceState:
    label = int(label)
    if not (0 <= label < state.num_labels):
        raise IndexError(f"label {label} out of range [0, {state.num_labels})")
    t = state.gamma * state.t
    t[label] += 1.0
    return LabelTraceState(t=t, gamma=state.gamma)


def trace_from_sequence(labels, num_labels: int, gamma: float) -> list[LabelTraceState]:
    """Trace state *before* each position: entry i covers labels[:i]."""
    state = trace_init(num_labels, gamma)
    out = [state]
    for y in labels[:-1]:
        state = trace_update(state, y)
        out.append(state)
    return out if len(labels) else []


def trace_closed_form(labels, num_labels: int, gamma: float, upto: int) -> np.ndarray:
    """Direct evaluation of the discounted-count sum over labels[:upto]."""
    gamma = _check_gamma(gamma)
    t = np.zeros(num_labels, dtype=np.float64)
    for k in range(upto):
        t[labels[k]] += gamma ** (upto - 1 - k)
    return t


def batch_trace_update(traces: np.ndarray, labels: np.ndarray, gamma: float) -> np.ndarray:
    """Vectorized trace_update over a batch: traces [B,K], labels [B]."""
    out = gamma * traces
    out[np.arange(traces.shape[0]), labels] += 1.0
    return out
