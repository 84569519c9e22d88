"""Perplexity and next-tag accuracy over a streaming evaluation pass.

Evaluation carries hidden state and label trace across BPTT windows
exactly like training, with dropout off. PPL scores every target token
in the batched stream, eos markers included (reports say so). The label
trace can be driven by gold tags or by the model's own predictions
("self" mode); the two numbers are reported separately, never mixed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import model as m
from .corpus import TaggedCorpus, batchify
from .errors import ContractError, SchemaError, ValidationError
from .trace import batch_trace_update
from .training import window_traces

__all__ = [
    "EvalReport",
    "evaluate_model",
    "perplexity",
    "tag_accuracy",
    "mean_stderr",
]


@dataclass
class EvalReport:
    """Metrics of one model on one corpus split."""

    mean_nll: float
    ppl: float
    token_count: int
    tag_accuracy: float | None
    trace_mode: str
    model_id: str = ""
    corpus_id: str = ""
    split: str = ""
    seed: int | None = None
    includes_eos: bool = True

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "corpus_id": self.corpus_id,
            "split": self.split,
            "token_count": self.token_count,
            "mean_nll": self.mean_nll,
            "ppl": self.ppl,
            "tag_accuracy": self.tag_accuracy,
            "trace_mode": self.trace_mode,
            "seed": self.seed,
            "includes_eos": self.includes_eos,
        }

    def to_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def _eval_geometry(corpus: TaggedCorpus, batch_size: int, bptt_len: int) -> tuple[int, int]:
    """Shrink the eval batch geometry when the corpus is smaller than it."""
    n = corpus.num_tokens
    bptt_len = min(bptt_len, max(1, n - 1))
    batch_size = min(batch_size, max(1, n // (bptt_len + 1)))
    return batch_size, bptt_len


def _self_trace_window(model, batch, aux_carry, trace, pending, gamma):
    """Per-timestep auxiliary pass building the trace from the model's own
    predictions. The tag of a stream's very first input is never folded in
    (the model never predicts it)."""
    cfg = model.config
    b, length = batch.inputs.shape
    reps = np.empty((b, length, cfg.tag_size))
    preds = np.empty((b, length), dtype=np.int64)
    for t in range(length):
        e_t = m.encode(model, batch.inputs[:, t : t + 1])
        tr = trace[:, None, :] if cfg.use_trace else None
        out = m.aux_forward(model, e_t, tr, aux_carry)
        aux_carry = out.carry
        reps[:, t] = out.rep.values[:, 0]
        preds[:, t] = out.predicted_tags[:, 0]
        fold = preds[:, t - 1] if t >= 1 else pending
        if fold is not None:
            trace = batch_trace_update(trace, fold, gamma)
    rep = m.PredictiveRepresentation(values=reps, kind=cfg.head_kind)
    return rep, preds, aux_carry, trace, preds[:, -1]


def evaluate_model(
    model: m.PrlModel,
    corpus: TaggedCorpus,
    gamma_trace: float = 0.0,
    trace_mode: str = "gold",
    batch_size: int = 10,
    bptt_len: int = 32,
) -> EvalReport:
    """Streaming evaluation; deterministic and side-effect free."""
    if trace_mode not in ("gold", "self"):
        raise ValidationError(f"trace_mode must be gold or self, got {trace_mode!r}")
    if corpus.vocab != model.vocab:
        raise SchemaError("corpus vocabulary does not match the model's")
    if corpus.tags != model.tags:
        raise SchemaError("corpus tag set does not match the model's")
    if trace_mode == "self" and not model.config.has_aux:
        raise ContractError("self-trace evaluation needs an auxiliary head")
    cfg = model.config
    batch_size, bptt_len = _eval_geometry(corpus, batch_size, bptt_len)
    batches = batchify(corpus, batch_size, bptt_len)
    lm_carry = m.lm_init_carry(model, batch_size)
    aux_carry = m.aux_init_carry(model, batch_size) if cfg.has_aux else []
    trace = np.zeros((batch_size, cfg.tag_size))
    pending = None
    total_nll = 0.0
    total_tokens = 0
    correct = 0
    with ad.no_grad():
        for batch in batches:
            b, length = batch.inputs.shape
            rep = None
            if cfg.has_aux:
                if trace_mode == "self":
                    rep, preds, aux_carry, trace, pending = _self_trace_window(
                        model, batch, aux_carry, trace, pending, gamma_trace
                    )
                else:
                    traces = None
                    if cfg.use_trace:
                        traces, trace = window_traces(trace, batch.input_tags, gamma_trace)
                    e_aux = m.encode(model, batch.targets if cfg.oracle_mode else batch.inputs)
                    fwd = m.oracle_aux_forward if cfg.oracle_mode else m.aux_forward
                    out = fwd(model, e_aux, traces, aux_carry)
                    rep, preds, aux_carry = out.rep, out.predicted_tags, out.carry
                correct += int((preds == batch.target_tags).sum())
            e = m.encode(model, batch.inputs)
            logits, lm_carry = m.lm_forward(model, e, rep, lm_carry)
            loss = ad.softmax_cross_entropy(logits, batch.targets.T.reshape(-1))
            total_nll += float(loss.data) * (b * length)
            total_tokens += b * length
    mean_nll = total_nll / total_tokens
    return EvalReport(
        mean_nll=mean_nll,
        ppl=float(np.exp(mean_nll)),
        token_count=total_tokens,
        tag_accuracy=(correct / total_tokens) if cfg.has_aux else None,
        trace_mode=trace_mode,
    )


def perplexity(
    model: m.PrlModel,
    corpus: TaggedCorpus,
    trace_mode: str = "gold",
    gamma_trace: float = 0.0,
    batch_size: int = 10,
    bptt_len: int = 32,
) -> EvalReport:
    return evaluate_model(
        model, corpus, gamma_trace=gamma_trace, trace_mode=trace_mode,
        batch_size=batch_size, bptt_len=bptt_len,
    )


def tag_accuracy(
    model: m.PrlModel,
    corpus: TaggedCorpus,
    trace_mode: str = "gold",
    gamma_trace: float = 0.0,
    batch_size: int = 10,
    bptt_len: int = 32,
) -> float:
    """Fraction of stream positions whose argmax representation entry is
    the gold next tag."""
    if not model.config.has_aux:
        raise ContractError("baseline model has no tag predictions to score")
    report = evaluate_model(
        model, corpus, gamma_trace=gamma_trace, trace_mode=trace_mode,
        batch_size=batch_size, bptt_len=bptt_len,
    )
    return report.tag_accuracy


def mean_stderr(values) -> tuple[float, float | None]:
    """Sample mean and standard error (std / sqrt(n)); stderr needs n >= 2."""
    arr = np.asarray(list(values), dtype=np.float64)
    if arr.size == 0:
        raise ValidationError("mean_stderr of an empty sequence")
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, None
    return mean, float(arr.std(ddof=1) / np.sqrt(arr.size))
