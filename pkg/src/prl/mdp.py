"""The deterministic chain MDP induced by a tagged token sequence.

Positions are states; the gold tag at a position is the only advancing
action (reward 1), every other tag jumps to an absorbing terminal state
with reward 0. Choosing the gold tag at the final position also ends the
episode with reward 1. Q(s, a) is therefore the expected discounted count
of consecutively correct tagging steps starting with action a.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, mse_loss
from .errors import NumericError, ValidationError

__all__ = [
    "SequenceMdp",
    "q_star",
    "q_star_closed_form",
    "q_learning_targets",
    "stream_q_targets",
    "td_loss",
]


@dataclass(frozen=True)
class SequenceMdp:
    """Chain MDP for one tagged sequence.

    terminal_at_end distinguishes a true sequence end (correct final action
    pays 1 and the episode stops) from a truncation point where the chain
    continues beyond the visible window.
    """

    gold: np.ndarray
    num_tags: int
    gamma: float
    terminal_at_end: bool = True

    def __post_init__(self):
        gold = np.asarray(self.gold, dtype=np.int64)
        object.__setattr__(self, "gold", gold)
        if gold.ndim != 1 or gold.size == 0:
            raise ValidationError("mdp needs a non-empty 1-D gold tag sequence")
        if not (0.0 <= self.gamma < 1.0):
            raise ValidationError(f"q discount must lie in [0, 1), got {self.gamma}")
        if gold.min() < 0 or gold.max() >= self.num_tags:
            raise ValidationError(
                f"gold tags must lie in [0, {self.num_tags}), got range "
                f"[{gold.min()}, {gold.max()}]"
            )

    @property
    def length(self) -> int:
        return self.gold.shape[0]


def q_star(mdp: SequenceMdp) -> np.ndarray:
    """Exact optimal action values via synchronous value iteration.

    The chain has horizon L, so iteration reaches the fixed point exactly
    after at most L sweeps; we stop when a sweep changes nothing.
    """
    if not mdp.terminal_at_end:
        raise ValidationError("q_star is only defined for a complete (terminating) sequence")
    length, k = mdp.length, mdp.num_tags
    q = np.zeros((length, k), dtype=np.float64)
    rows = np.arange(length)
    for _ in range(length + 1):
        nxt = np.zeros((length, k), dtype=np.float64)
        gold_vals = np.ones(length, dtype=np.float64)
        gold_vals[:-1] += mdp.gamma * q[1:].max(axis=1)
        nxt[rows, mdp.gold] = gold_vals
        if np.array_equal(nxt, q):
            break
        q = nxt
    return q


def q_star_closed_form(mdp: SequenceMdp) -> np.ndarray:
    """Geometric closed form: Q*(t, gold_t) = sum_{k=0}^{L-1-t} gamma^k."""
    length, k = mdp.length, mdp.num_tags
    q = np.zeros((length, k), dtype=np.float64)
    steps_left = np.arange(length, 0, -1, dtype=np.float64)
    if mdp.gamma == 0.0:
        gold_vals = np.ones(length, dtype=np.float64)
    else:
        gold_vals = (1.0 - mdp.gamma ** steps_left) / (1.0 - mdp.gamma)
    q[np.arange(length), mdp.gold] = gold_vals
    return q


def q_learning_targets(
    q_pred: np.ndarray,
    mdp: SequenceMdp,
    bootstrap_row: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One-step full-row backup targets and the supervised-position mask.

    target(t, gold_t) = 1 + gamma * max_a q_pred(t+1, a); non-gold entries
    are 0. The final position takes 1 when the sequence truly terminates,
    bootstraps from bootstrap_row when one is supplied, and is masked out
    otherwise. Targets are constants (no gradient flows through them).
    """
    q_pred = np.asarray(q_pred, dtype=np.float64)
    if q_pred.shape != (mdp.length, mdp.num_tags):
        raise ValidationError(
            f"q_pred shape {q_pred.shape} does not match mdp ({mdp.length}, {mdp.num_tags})"
        )
    if not np.isfinite(q_pred).all():
        raise NumericError("q_pred contains non-finite values")
    length = mdp.length
    targets = np.zeros_like(q_pred)
    mask = np.ones(length, dtype=bool)
    gold_vals = np.ones(length, dtype=np.float64)
    gold_vals[:-1] += mdp.gamma * q_pred[1:].max(axis=1)
    if mdp.terminal_at_end:
        gold_vals[-1] = 1.0
    elif bootstrap_row is not None:
        gold_vals[-1] = 1.0 + mdp.gamma * float(np.max(bootstrap_row))
    else:
        mask[-1] = False
        gold_vals[-1] = 0.0
    targets[np.arange(length), mdp.gold] = gold_vals
    return targets, mask


def stream_q_targets(
    q_pred: np.ndarray,
    gold: np.ndarray,
    gamma: float,
    bootstrap: np.ndarray | None = None,
    terminal: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Batched backup over a BPTT window: q_pred [L,B,K], gold [L,B].

    Same backup as q_learning_targets applied independently per stream;
    bootstrap [B,K] supplies the successor row past the window when the
    stream continues.
    """
    if not np.isfinite(q_pred).all():
        raise NumericError("q_pred contains non-finite values")
    length, batch, k = q_pred.shape
    targets = np.zeros_like(q_pred)
    mask = np.ones((length, batch), dtype=bool)
    gold_vals = np.ones((length, batch), dtype=np.float64)
    gold_vals[:-1] += gamma * q_pred[1:].max(axis=2)
    if terminal:
        gold_vals[-1] = 1.0
    elif bootstrap is not None:
        gold_vals[-1] = 1.0 + gamma * bootstrap.max(axis=1)
    else:
        mask[-1] = False
        gold_vals[-1] = 0.0
    l_idx, b_idx = np.meshgrid(np.arange(length), np.arange(batch), indexing="ij")
    targets[l_idx, b_idx, gold] = gold_vals
    return targets, mask


def td_loss(q_pred: Tensor, targets: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Mean squared error between predicted and target action values."""
    return mse_loss(q_pred, targets, row_mask=mask)
