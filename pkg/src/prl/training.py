"""Alternating two-task training.

Each BPTT window is shared by both tasks: an auxiliary step (when
scheduled by the alternation ratio) updates the auxiliary decoder plus
the shared encoder, then a language-model step updates the LM decoder
plus the shared encoder. The predictive representation consumed by the
LM step is recomputed after the auxiliary update and treated as a
constant, so each update touches exactly its own decoder and the encoder.

Hidden state, cell state and the label trace are carried across windows
and reset at stream start (= each epoch). Plain SGD with global-norm
gradient clipping and decay-on-plateau; everything is deterministic in
(seed, config, corpus).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import model as m
from .corpus import BpttBatch, TaggedCorpus, batchify, split_corpus
from .errors import NumericError, TrainingDiverged, ValidationError
from .mdp import stream_q_targets, td_loss
from .trace import batch_trace_update

__all__ = [
    "GAMMA_GRID",
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "TrainState",
    "train",
    "lm_step",
    "aux_step",
    "window_traces",
    "sgd_update",
]

GAMMA_GRID = (0.0, 0.5, 0.67, 0.8, 0.9, 0.99)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; model structure lives in ModelConfig."""

    lr: float = 1.0
    gamma_q: float = 0.9
    gamma_trace: float = 0.9
    batch_size: int = 32
    bptt_len: int = 32
    epochs: int = 10
    seed: int = 0
    clip_norm: float = 0.25
    dropout: float = 0.3
    alternation_ratio: int = 1  # LM windows per auxiliary update
    eval_trace_mode: str = "gold"
    lr_decay: float = 0.5
    lr_patience: int = 1
    eval_batch_size: int = 10
    valid_fraction: float = 0.1
    allow_nonstandard_gamma: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.lr_decay <= 0 or self.lr_decay > 1:
            raise ValidationError("lr must be positive and lr_decay in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1 or self.bptt_len < 1:
            raise ValidationError("epochs, batch_size and bptt_len must be positive")
        if not (0.0 <= self.dropout < 1.0):
            raise ValidationError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.clip_norm < 0:
            raise ValidationError("clip_norm must be >= 0 (0 disables clipping)")
        if self.alternation_ratio < 1:
            raise ValidationError("alternation_ratio must be >= 1")
        if self.eval_trace_mode not in ("gold", "self"):
            raise ValidationError(f"eval_trace_mode must be gold or self, got {self.eval_trace_mode!r}")
        if not self.allow_nonstandard_gamma:
            for name, g in (("gamma_q", self.gamma_q), ("gamma_trace", self.gamma_trace)):
                if g not in GAMMA_GRID:
                    raise ValidationError(
                        f"{name}={g} is outside the grid {GAMMA_GRID}; "
                        "set allow_nonstandard_gamma to override"
                    )
        if not (0.0 <= self.gamma_q < 1.0):
            raise ValidationError("gamma_q must lie in [0, 1)")
        if not (0.0 <= self.gamma_trace <= 1.0):
            raise ValidationError("gamma_trace must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_lm_loss: float
    train_ppl: float
    train_aux_loss: float | None
    valid_lm_loss: float
    valid_ppl: float
    valid_tag_accuracy: float | None
    lr: float
    wall_time_s: float

    CSV_FIELDS = (
        "epoch",
        "train_lm_loss",
        "train_ppl",
        "train_aux_loss",
        "valid_lm_loss",
        "valid_ppl",
        "valid_tag_accuracy",
        "lr",
        "wall_time_s",
    )

    def core(self) -> tuple:
        """Everything that must reproduce bit-exactly (wall time excluded)."""
        return (
            self.epoch,
            self.train_lm_loss,
            self.train_ppl,
            self.train_aux_loss,
            self.valid_lm_loss,
            self.valid_ppl,
            self.valid_tag_accuracy,
            self.lr,
        )


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_ppl: float = math.inf
    diverged: bool = False

    def core_rows(self) -> list[tuple]:
        return [r.core() for r in self.records]

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(EpochRecord.CSV_FIELDS) + "\n")
            for r in self.records:
                row = [getattr(r, f) for f in EpochRecord.CSV_FIELDS]
                fh.write(",".join("" if v is None else repr(v) for v in row) + "\n")

    def to_json_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_valid_ppl": self.best_valid_ppl,
            "diverged": self.diverged,
            "epochs": [
                {f: getattr(r, f) for f in EpochRecord.CSV_FIELDS} for r in self.records
            ],
        }


@dataclass
class TrainState:
    """Mutable per-run carry: decoder states, label trace, RNG."""

    lm_carry: list[m.LayerCarry]
    aux_carry: list[m.LayerCarry]
    trace: np.ndarray
    rng: np.random.Generator

    @classmethod
    def fresh(cls, model: m.PrlModel, batch_size: int, rng: np.random.Generator) -> "TrainState":
        return cls(
            lm_carry=m.lm_init_carry(model, batch_size),
            aux_carry=m.aux_init_carry(model, batch_size) if model.config.has_aux else [],
            trace=np.zeros((batch_size, model.config.tag_size)),
            rng=rng,
        )

    def reset_streams(self, model: m.PrlModel, batch_size: int) -> None:
        self.lm_carry = m.lm_init_carry(model, batch_size)
        if model.config.has_aux:
            self.aux_carry = m.aux_init_carry(model, batch_size)
        self.trace = np.zeros((batch_size, model.config.tag_size))


def window_traces(
    trace: np.ndarray, input_tags: np.ndarray, gamma: float
) -> tuple[np.ndarray, np.ndarray]:
    """Trace fed at each window position plus the carried-out state.

    traces[b, t] covers every input tag strictly before position t (the
    carried history included); the returned carry has absorbed the whole
    window.
    """
    b, length = input_tags.shape
    k = trace.shape[1]
    out = np.empty((b, length, k), dtype=np.float64)
    cur = trace
    for t in range(length):
        out[:, t] = cur
        cur = batch_trace_update(cur, input_tags[:, t], gamma)
    return out, cur


def _dropout_masks(rng, rate, batch_size, sites: dict[str, int]) -> dict | None:
    if rate <= 0.0:
        return None
    keep = 1.0 - rate
    return {
        name: (rng.random((batch_size, dim)) < keep).astype(np.float64) / keep
        for name, dim in sites.items()
    }


def _aux_sites(cfg: m.ModelConfig) -> dict[str, int]:
    return {"aux_in": cfg.d_embed, "aux_h0": cfg.aux_hidden}


def _lm_sites(cfg: m.ModelConfig) -> dict[str, int]:
    return {
        "lm_in": cfg.d_embed,
        "lm_h1": cfg.lm_hidden[0],
        "lm_h2": cfg.lm_hidden[1],
        "lm_h3": cfg.lm_hidden[2],
    }


def sgd_update(tensors, lr: float, clip_norm: float) -> float:
    """Clip the global gradient norm, apply SGD, return the pre-clip norm."""
    grads = [t.grad for t in tensors if t.grad is not None]
    if not grads:
        return 0.0
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    scale = clip_norm / norm if clip_norm > 0 and norm > clip_norm else 1.0
    step = lr * scale
    for t in tensors:
        if t.grad is not None:
            t.data -= step * t.grad
    return norm


def _run_aux(model, e, traces, carry, masks):
    fwd = m.oracle_aux_forward if model.config.oracle_mode else m.aux_forward
    return fwd(model, e, traces, carry, masks)


def aux_step(
    model: m.PrlModel,
    batch: BpttBatch,
    config: TrainConfig,
    state: TrainState,
    traces: np.ndarray | None = None,
    lr: float | None = None,
) -> float:
    """One auxiliary update: loss on the head, gradients into the
    auxiliary decoder and the shared encoder only. Carries not advanced
    (the LM step owns carry advancement for the shared window)."""
    cfg = model.config
    lr = config.lr if lr is None else lr
    if traces is None and cfg.has_aux and cfg.use_trace:
        traces, _ = window_traces(state.trace, batch.input_tags, config.gamma_trace)
    b, length = batch.inputs.shape
    masks = _dropout_masks(state.rng, config.dropout, b, _aux_sites(cfg))
    e = m.encode(model, batch.targets if cfg.oracle_mode else batch.inputs)
    out = _run_aux(model, e, traces, state.aux_carry, masks)
    gold_flat = batch.target_tags.T.reshape(-1)
    if cfg.head_kind == "p":
        loss = ad.softmax_cross_entropy(out.logits, gold_flat)
    else:
        q_lbk = out.logits.data.reshape(length, b, cfg.tag_size)
        bootstrap = None
        if not batch.final and not cfg.oracle_mode:
            bootstrap = _lookahead_row(model, batch, config, state, out.carry)
        targets, mask = stream_q_targets(
            q_lbk, batch.target_tags.T, config.gamma_q, bootstrap, terminal=batch.final
        )
        loss = td_loss(out.logits, targets.reshape(length * b, -1), mask.reshape(-1))
    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        raise NumericError("non-finite auxiliary loss")
    ad.backward(loss)
    scoped = model.tensors("aux") + model.tensors("encoder")
    sgd_update(scoped, lr, config.clip_norm)
    ad.zero_grad(model.tensors("all"))
    return loss_val


def _lookahead_row(model, batch, config, state, carry_after) -> np.ndarray:
    """Action values one step past the window, for the final bootstrap.

    The next window's first input token is this window's last target; the
    carried-out trace already covers every input tag of the window.
    """
    next_ids = batch.targets[:, -1:]
    _, next_trace = window_traces(state.trace, batch.input_tags, config.gamma_trace)
    with ad.no_grad():
        e_next = m.encode(model, next_ids)
        tr = next_trace[:, None, :] if model.config.use_trace else None
        out = m.aux_forward(model, e_next, tr, carry_after)
    return out.logits.data


def lm_step(
    model: m.PrlModel,
    batch: BpttBatch,
    config: TrainConfig,
    state: TrainState,
    traces: np.ndarray | None = None,
    new_trace: np.ndarray | None = None,
    lr: float | None = None,
) -> float:
    """One LM update: cross-entropy through encoder -> (detached aux
    representation) -> LM decoder; gradients into the LM decoder and the
    shared encoder only. Advances every carried state."""
    cfg = model.config
    lr = config.lr if lr is None else lr
    if cfg.has_aux and cfg.use_trace and traces is None:
        traces, new_trace = window_traces(state.trace, batch.input_tags, config.gamma_trace)
    b, length = batch.inputs.shape
    e = m.encode(model, batch.inputs)
    rep = None
    if cfg.has_aux:
        aux_masks = _dropout_masks(state.rng, config.dropout, b, _aux_sites(cfg))
        with ad.no_grad():
            e_aux = m.encode(model, batch.targets) if cfg.oracle_mode else e
            aux_out = _run_aux(model, e_aux, traces, state.aux_carry, aux_masks)
        rep = aux_out.rep
        state.aux_carry = aux_out.carry
    lm_masks = _dropout_masks(state.rng, config.dropout, b, _lm_sites(cfg))
    logits, lm_carry = m.lm_forward(model, e, rep, state.lm_carry, lm_masks)
    loss = ad.softmax_cross_entropy(logits, batch.targets.T.reshape(-1))
    loss_val = float(loss.data)
    if not math.isfinite(loss_val):
        raise NumericError("non-finite LM loss")
    ad.backward(loss)
    scoped = model.tensors("lm") + model.tensors("encoder")
    sgd_update(scoped, lr, config.clip_norm)
    ad.zero_grad(model.tensors("all"))
    state.lm_carry = lm_carry
    if new_trace is not None:
        state.trace = new_trace
    return loss_val


def train(
    model: m.PrlModel,
    corpus: TaggedCorpus,
    config: TrainConfig,
    valid_corpus: TaggedCorpus | None = None,
) -> TrainLog:
    """Train to the epoch budget; the model ends loaded with the
    best-validation-PPL parameters. Raises TrainingDiverged (with the
    partial log attached as .log) if validation PPL explodes or a loss
    goes non-finite."""
    from .evaluation import evaluate_model  # local import: evaluation also imports model

    cfg = model.config
    if valid_corpus is None:
        n_words = sum(t.size for t, _ in corpus.sentences)
        corpus, valid_corpus = split_corpus(corpus, max(1, int(n_words * config.valid_fraction)))
    batches = batchify(corpus, config.batch_size, config.bptt_len)
    rng = np.random.default_rng(config.seed)
    state = TrainState.fresh(model, config.batch_size, rng)

    def valid_eval():
        return evaluate_model(
            model,
            valid_corpus,
            gamma_trace=config.gamma_trace,
            trace_mode=config.eval_trace_mode,
            batch_size=config.eval_batch_size,
            bptt_len=config.bptt_len,
        )

    initial_ppl = valid_eval().ppl
    log = TrainLog()
    lr = config.lr
    plateau = 0
    best_params: dict[str, np.ndarray] = {}
    use_traces = cfg.has_aux and cfg.use_trace

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        state.reset_streams(model, config.batch_size)
        lm_losses, aux_losses = [], []
        for w, batch in enumerate(batches):
            traces = new_trace = None
            if use_traces:
                traces, new_trace = window_traces(state.trace, batch.input_tags, config.gamma_trace)
            try:
                if cfg.has_aux and w % config.alternation_ratio == 0:
                    aux_losses.append(aux_step(model, batch, config, state, traces, lr=lr))
                lm_losses.append(
                    lm_step(model, batch, config, state, traces, new_trace, lr=lr)
                )
            except NumericError as exc:
                log.diverged = True
                err = TrainingDiverged(f"{exc} at epoch {epoch}, window {w}, lr {lr}")
                err.log = log
                raise err from None
        report = valid_eval()
        record = EpochRecord(
            epoch=epoch,
            train_lm_loss=float(np.mean(lm_losses)),
            train_ppl=float(np.exp(np.mean(lm_losses))),
            train_aux_loss=float(np.mean(aux_losses)) if aux_losses else None,
            valid_lm_loss=report.mean_nll,
            valid_ppl=report.ppl,
            valid_tag_accuracy=report.tag_accuracy,
            lr=lr,
            wall_time_s=time.perf_counter() - t0,
        )
        log.records.append(record)
        if report.ppl < log.best_valid_ppl:
            log.best_valid_ppl = report.ppl
            log.best_epoch = epoch
            best_params = {n: t.data.copy() for n, t in model.params.items()}
            plateau = 0
        else:
            plateau += 1
            if plateau >= config.lr_patience:
                lr *= config.lr_decay
                plateau = 0
        if report.ppl > 10.0 * initial_ppl or not math.isfinite(report.ppl):
            log.diverged = True
            err = TrainingDiverged(
                f"validation PPL {report.ppl:.2f} exceeded 10x initial {initial_ppl:.2f} "
                f"at epoch {epoch}"
            )
            err.log = log
            raise err
    if best_params:
        for n, t in model.params.items():
            t.data = best_params[n]
    return log
