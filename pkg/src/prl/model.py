"""The PRL model stack: shared embedding encoder, auxiliary tag decoder
producing predictive representations, and a 3-layer LSTM language-model
decoder that consumes those representations after its first layer.

Layouts: public entry points take batch-major [B, L] id grids and return
batch-major views where a contract fixes one ([B, L, K] representations);
recurrent internals run time-major, with activations flattened to
[L*B, dim] so the input-side matmul of every LSTM layer is a single GEMM
(row t*B+b holds timestep t of stream b).

The auxiliary decoder is a 2-layer LSTM over [embedding ; label trace]
with a linear head of one of two kinds: "p" (softmax over next-word tags)
or "q" (action values per candidate tag). head "none" is the baseline
language model with the auxiliary path absent entirely.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .corpus import TagSet, Vocab
from .errors import (
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ContractError,
    DimensionError,
    SchemaError,
    ValidationError,
)

__all__ = [
    "ModelConfig",
    "PrlModel",
    "PredictiveRepresentation",
    "AuxOutput",
    "LayerCarry",
    "init_model",
    "init_carry",
    "encode",
    "aux_forward",
    "oracle_aux_forward",
    "lm_forward",
    "num_params",
    "save_checkpoint",
    "load_checkpoint",
    "to_batch_major",
]

HEAD_KINDS = ("p", "q", "none")

CHECKPOINT_MAGIC = b"PRL1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Structural hyperparameters of one model instance."""

    vocab_size: int
    tag_size: int
    d_embed: int = 128
    lm_hidden: tuple[int, int, int] = (256, 256, 256)
    aux_hidden: int = 64
    head_kind: str = "q"
    use_trace: bool = True
    oracle_mode: bool = False
    tie_weights: bool = False

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise ValidationError(f"head_kind must be one of {HEAD_KINDS}, got {self.head_kind!r}")
        if len(self.lm_hidden) != 3:
            raise ValidationError("lm_hidden must list exactly three layer sizes")
        if self.tie_weights and self.lm_hidden[2] != self.d_embed:
            raise ValidationError(
                "tied weights require the last LM hidden size to equal d_embed"
            )
        if min(self.vocab_size, self.tag_size, self.d_embed, self.aux_hidden, *self.lm_hidden) < 1:
            raise ValidationError("all model dimensions must be positive")
        if self.oracle_mode and self.head_kind == "none":
            raise ValidationError("oracle_mode requires an auxiliary head")

    @property
    def has_aux(self) -> bool:
        return self.head_kind != "none"

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "tag_size": self.tag_size,
            "d_embed": self.d_embed,
            "lm_hidden": list(self.lm_hidden),
            "aux_hidden": self.aux_hidden,
            "head_kind": self.head_kind,
            "use_trace": self.use_trace,
            "oracle_mode": self.oracle_mode,
            "tie_weights": self.tie_weights,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        doc = dict(doc)
        doc["lm_hidden"] = tuple(doc["lm_hidden"])
        return cls(**doc)


@dataclass(eq=False)
class PrlModel:
    """Parameter bundle plus the vocab/tag maps it was built for."""

    config: ModelConfig
    params: dict[str, Tensor]
    vocab: Vocab
    tags: TagSet

    def param_names(self, group: str) -> list[str]:
        """Names in a scope group: 'encoder', 'aux', 'lm', or 'all'."""
        if group == "all":
            return list(self.params)
        return [n for n in self.params if n.split(".", 1)[0] == group]

    def tensors(self, group: str = "all") -> list[Tensor]:
        return [self.params[n] for n in self.param_names(group)]


@dataclass(eq=False)
class PredictiveRepresentation:
    """Detached auxiliary outputs R as [B, L, K]; kind 'p' rows are
    probability distributions, kind 'q' rows are raw action values."""

    values: np.ndarray
    kind: str

    def validate(self) -> None:
        if self.kind == "p":
            if (self.values < 0).any():
                raise ValidationError("p-kind representation has negative entries")
            sums = self.values.sum(axis=-1)
            if np.abs(sums - 1.0).max() > 1e-9:
                raise ValidationError("p-kind representation rows do not sum to 1")

    def time_major_flat(self) -> np.ndarray:
        b, l, k = self.values.shape
        return np.ascontiguousarray(self.values.swapaxes(0, 1)).reshape(l * b, k)


@dataclass(eq=False)
class AuxOutput:
    rep: PredictiveRepresentation
    logits: Tensor  # time-major flat [L*B, K]
    predicted_tags: np.ndarray  # [B, L]
    carry: list["LayerCarry"]


LayerCarry = tuple[np.ndarray, np.ndarray]  # (h, c), each [B, hidden]


def to_batch_major(flat: np.ndarray, batch_size: int, bptt_len: int) -> np.ndarray:
    """[L*B, D] time-major rows -> [B, L, D]."""
    return np.ascontiguousarray(
        flat.reshape(bptt_len, batch_size, *flat.shape[1:]).swapaxes(0, 1)
    )


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------


def _init_lstm(params, prefix, d_in, d_h, rng):
    scale = 1.0 / np.sqrt(d_h)
    params[f"{prefix}.Wx"] = Tensor(rng.uniform(-scale, scale, (d_in, 4 * d_h)), requires_grad=True)
    params[f"{prefix}.Wh"] = Tensor(rng.uniform(-scale, scale, (d_h, 4 * d_h)), requires_grad=True)
    bias = np.zeros(4 * d_h)
    bias[d_h : 2 * d_h] = 1.0  # forget gate open at init
    params[f"{prefix}.b"] = Tensor(bias, requires_grad=True)


def init_model(config: ModelConfig, vocab: Vocab, tags: TagSet, seed: int) -> PrlModel:
    """Seeded parameter init. The auxiliary head starts at zero (action
    values begin at 0, tag probabilities uniform); the output projection
    starts small-uniform like the embeddings."""
    if len(vocab) != config.vocab_size or len(tags) != config.tag_size:
        raise SchemaError(
            f"config sizes (V={config.vocab_size}, K={config.tag_size}) do not match "
            f"vocab ({len(vocab)}) / tags ({len(tags)})"
        )
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    params["encoder.embed"] = Tensor(
        rng.uniform(-0.1, 0.1, (config.vocab_size, config.d_embed)), requires_grad=True
    )
    k = config.tag_size
    if config.has_aux:
        aux_in = config.d_embed + (k if config.use_trace else 0)
        _init_lstm(params, "aux.l0", aux_in, config.aux_hidden, rng)
        _init_lstm(params, "aux.l1", config.aux_hidden, config.aux_hidden, rng)
        params["aux.head.W"] = Tensor(np.zeros((config.aux_hidden, k)), requires_grad=True)
        params["aux.head.b"] = Tensor(np.zeros(k), requires_grad=True)
    h1, h2, h3 = config.lm_hidden
    _init_lstm(params, "lm.l0", config.d_embed, h1, rng)
    _init_lstm(params, "lm.l1", h1 + (k if config.has_aux else 0), h2, rng)
    _init_lstm(params, "lm.l2", h2, h3, rng)
    if not config.tie_weights:
        params["lm.proj.W"] = Tensor(
            rng.uniform(-0.1, 0.1, (h3, config.vocab_size)), requires_grad=True
        )
    params["lm.proj.b"] = Tensor(np.zeros(config.vocab_size), requires_grad=True)
    return PrlModel(config=config, params=params, vocab=vocab, tags=tags)


def init_carry(hidden: int, batch_size: int) -> LayerCarry:
    return (np.zeros((batch_size, hidden)), np.zeros((batch_size, hidden)))


def lm_init_carry(model: PrlModel, batch_size: int) -> list[LayerCarry]:
    return [init_carry(h, batch_size) for h in model.config.lm_hidden]


def aux_init_carry(model: PrlModel, batch_size: int) -> list[LayerCarry]:
    return [init_carry(model.config.aux_hidden, batch_size) for _ in range(2)]


def num_params(model: PrlModel) -> int:
    return sum(t.data.size for t in model.params.values())


# ---------------------------------------------------------------------------
# forward passes
# ---------------------------------------------------------------------------


def encode(model: PrlModel, ids: np.ndarray) -> Tensor:
    """Embed a [B, L] id grid into [B, L, d_embed] through the shared table."""
    ids = np.asarray(ids, dtype=np.int64)
    b, l = ids.shape
    flat = ad.embedding_lookup(model.params["encoder.embed"], ids.reshape(-1))
    return ad.reshape(flat, (b, l, model.config.d_embed))


def _flatten_time_major(x: Tensor) -> tuple[Tensor, int, int]:
    b, l = x.data.shape[0], x.data.shape[1]
    return ad.reshape(ad.swap01(x), (l * b, x.data.shape[2])), b, l


def _apply_mask(x: Tensor, mask: np.ndarray | None, bptt_len: int) -> Tensor:
    """Multiply by a per-stream dropout mask, tiled across timesteps."""
    if mask is None:
        return x
    return ad.mul(x, ad.constant(np.tile(mask, (bptt_len, 1))))


def _run_lstm_layer(
    x_flat: Tensor,
    bptt_len: int,
    batch_size: int,
    wx: Tensor,
    wh: Tensor,
    bias: Tensor,
    carry: LayerCarry,
) -> tuple[Tensor, LayerCarry]:
    """One LSTM layer over a time-major flat input; returns stacked hidden
    states [L*B, h] and the detached final (h, c)."""
    d_h = wh.data.shape[0]
    zx = ad.matmul(x_flat, wx)
    h_prev = ad.constant(carry[0])
    c_prev = ad.constant(carry[1])
    hs = []
    for t in range(bptt_len):
        z = ad.add_bias(
            ad.add(ad.slice_axis(zx, 0, t * batch_size, (t + 1) * batch_size), ad.matmul(h_prev, wh)),
            bias,
        )
        gi = ad.sigmoid(ad.slice_axis(z, 1, 0, d_h))
        gf = ad.sigmoid(ad.slice_axis(z, 1, d_h, 2 * d_h))
        gg = ad.tanh(ad.slice_axis(z, 1, 2 * d_h, 3 * d_h))
        go = ad.sigmoid(ad.slice_axis(z, 1, 3 * d_h, 4 * d_h))
        c_prev = ad.add(ad.mul(gf, c_prev), ad.mul(gi, gg))
        h_prev = ad.mul(go, ad.tanh(c_prev))
        hs.append(h_prev)
    h_all = ad.concat(hs, axis=0) if bptt_len > 1 else hs[0]
    return h_all, (h_prev.data.copy(), c_prev.data.copy())


def _aux_core(
    model: PrlModel,
    e: Tensor,
    traces: np.ndarray | None,
    carry: list[LayerCarry],
    dropout_masks: dict | None,
) -> AuxOutput:
    cfg = model.config
    p = model.params
    masks = dropout_masks or {}
    e_flat, b, l = _flatten_time_major(e)
    x = _apply_mask(e_flat, masks.get("aux_in"), l)
    if cfg.use_trace:
        if traces is None:
            raise ContractError("this model consumes label traces; none were provided")
        tr = np.asarray(traces, dtype=np.float64)
        if tr.shape != (b, l, cfg.tag_size):
            raise DimensionError(
                f"traces shape {tr.shape} does not match (B, L, K) = {(b, l, cfg.tag_size)}"
            )
        tr_flat = np.ascontiguousarray(tr.swapaxes(0, 1)).reshape(l * b, cfg.tag_size)
        x = ad.concat([x, ad.constant(tr_flat)], axis=1)
    h0, c0 = _run_lstm_layer(x, l, b, p["aux.l0.Wx"], p["aux.l0.Wh"], p["aux.l0.b"], carry[0])
    h0 = _apply_mask(h0, masks.get("aux_h0"), l)
    h1, c1 = _run_lstm_layer(h0, l, b, p["aux.l1.Wx"], p["aux.l1.Wh"], p["aux.l1.b"], carry[1])
    logits = ad.add_bias(ad.matmul(h1, p["aux.head.W"]), p["aux.head.b"])
    r_flat = ad.softmax(logits.data, axis=1) if cfg.head_kind == "p" else logits.data.copy()
    rep = PredictiveRepresentation(values=to_batch_major(r_flat, b, l), kind=cfg.head_kind)
    predicted = to_batch_major(np.argmax(r_flat, axis=1)[:, None], b, l)[:, :, 0]
    return AuxOutput(rep=rep, logits=logits, predicted_tags=predicted, carry=[c0, c1])


def aux_forward(
    model: PrlModel,
    e: Tensor,
    traces: np.ndarray | None,
    carry: list[LayerCarry],
    dropout_masks: dict | None = None,
) -> AuxOutput:
    """Auxiliary decoder over current-word embeddings e [B, L, d_embed].

    traces, when the model uses them, hold the label-trace vector fed
    alongside each position ([B, L, K], strictly-past labels only).
    """
    if not model.config.has_aux:
        raise ContractError("baseline model has no auxiliary decoder")
    if model.config.oracle_mode:
        raise ContractError("oracle-mode model requires oracle_aux_forward with next-word embeddings")
    return _aux_core(model, e, traces, carry, dropout_masks)


def oracle_aux_forward(
    model: PrlModel,
    e_next: Tensor,
    traces: np.ndarray | None,
    carry: list[LayerCarry],
    dropout_masks: dict | None = None,
) -> AuxOutput:
    """Oracle variant: identical computation fed the *next* word's embedding.

    Diagnostic only; the resulting model is not a valid language model
    because the auxiliary path sees the word being predicted.
    """
    if not model.config.oracle_mode:
        raise ContractError("oracle_aux_forward requires a model built with oracle_mode")
    return _aux_core(model, e_next, traces, carry, dropout_masks)


def lm_forward(
    model: PrlModel,
    e: Tensor,
    rep: PredictiveRepresentation | None,
    carry: list[LayerCarry],
    dropout_masks: dict | None = None,
) -> tuple[Tensor, list[LayerCarry]]:
    """LM decoder: layer 1 over embeddings, predictive representation
    concatenated with h1 at every timestep, layers 2-3, projection.

    Returns time-major flat logits [L*B, V] (row t*B+b is stream b at
    step t) and the new carry. rep is consumed as a constant: LM-task
    gradients never reach the auxiliary decoder.
    """
    cfg = model.config
    p = model.params
    masks = dropout_masks or {}
    e_flat, b, l = _flatten_time_major(e)
    x = _apply_mask(e_flat, masks.get("lm_in"), l)
    h1, c1 = _run_lstm_layer(x, l, b, p["lm.l0.Wx"], p["lm.l0.Wh"], p["lm.l0.b"], carry[0])
    h1 = _apply_mask(h1, masks.get("lm_h1"), l)
    if cfg.has_aux:
        if rep is None:
            raise ContractError("model with an auxiliary head needs a predictive representation")
        r_flat = rep.time_major_flat()
        if r_flat.shape != (l * b, cfg.tag_size):
            raise DimensionError(
                f"representation shape {rep.values.shape} does not match (B, L, K)"
            )
        x2 = ad.concat([h1, ad.constant(r_flat)], axis=1)
    else:
        if rep is not None:
            raise ContractError("baseline model cannot consume a predictive representation")
        x2 = h1
    h2, c2 = _run_lstm_layer(x2, l, b, p["lm.l1.Wx"], p["lm.l1.Wh"], p["lm.l1.b"], carry[1])
    h2 = _apply_mask(h2, masks.get("lm_h2"), l)
    h3, c3 = _run_lstm_layer(h2, l, b, p["lm.l2.Wx"], p["lm.l2.Wh"], p["lm.l2.b"], carry[2])
    h3 = _apply_mask(h3, masks.get("lm_h3"), l)
    if cfg.tie_weights:
        logits = ad.add_bias(ad.matmul(h3, ad.transpose2d(p["encoder.embed"])), p["lm.proj.b"])
    else:
        logits = ad.add_bias(ad.matmul(h3, p["lm.proj.W"]), p["lm.proj.b"])
    return logits, [c1, c2, c3]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(model: PrlModel, path, extra: dict | None = None) -> None:
    """Binary checkpoint: magic, u32 version, u32-length-prefixed JSON
    header, then raw little-endian float64 blobs in header order."""
    header = {
        "config": model.config.to_dict(),
        "vocab": list(model.vocab.id_to_token),
        "tags": list(model.tags.id_to_tag),
        "params": [{"name": n, "shape": list(model.params[n].data.shape)} for n in model.params],
        "extra": extra or {},
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in model.params:
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path, expect: ModelConfig | None = None) -> tuple[PrlModel, dict]:
    """Load a checkpoint; returns (model, extra header dict).

    With `expect`, the stored structural config must match exactly (e.g.
    a q-head checkpoint will not load into a p-head slot).
    """
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointVersionError(f"{path}: not a PRL checkpoint (magic {magic!r})")
        raw = fh.read(4)
        if len(raw) < 4:
            raise CheckpointTruncatedError(f"{path}: truncated before version field")
        (version,) = struct.unpack("<I", raw)
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(
                f"{path}: format version {version}, expected {CHECKPOINT_VERSION}"
            )
        raw = fh.read(4)
        if len(raw) < 4:
            raise CheckpointTruncatedError(f"{path}: truncated before header length")
        (hlen,) = struct.unpack("<I", raw)
        blob = fh.read(hlen)
        if len(blob) < hlen:
            raise CheckpointTruncatedError(f"{path}: truncated inside JSON header")
        try:
            header = json.loads(blob.decode("utf-8"))
            config = ModelConfig.from_dict(header["config"])
        except (ValueError, KeyError) as exc:
            raise CheckpointShapeError(f"{path}: malformed header ({exc})") from None
        if expect is not None and config != expect:
            raise SchemaError(
                f"{path}: checkpoint config {config.to_dict()} does not match "
                f"expected {expect.to_dict()}"
            )
        params: dict[str, Tensor] = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape, dtype=np.int64)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) < 8 * count:
                raise CheckpointTruncatedError(
                    f"{path}: truncated inside parameter {entry['name']!r}"
                )
            arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            params[entry["name"]] = Tensor(arr, requires_grad=True)

    id_to_token = tuple(header["vocab"])
    vocab = Vocab(
        id_to_token=id_to_token,
        token_to_id={t: i for i, t in enumerate(id_to_token)},
        unk_id=id_to_token.index("<unk>"),
        eos_id=id_to_token.index("<eos>"),
    )
    id_to_tag = tuple(header["tags"])
    tags = TagSet(
        id_to_tag=id_to_tag,
        tag_to_id={t: i for i, t in enumerate(id_to_tag)},
        eos_tag_id=len(id_to_tag) - 1,
    )
    model = PrlModel(config=config, params=params, vocab=vocab, tags=tags)
    _validate_param_shapes(model, path)
    return model, header.get("extra", {})


def _validate_param_shapes(model: PrlModel, path) -> None:
    reference = init_model(model.config, model.vocab, model.tags, seed=0)
    expected = {n: t.data.shape for n, t in reference.params.items()}
    actual = {n: t.data.shape for n, t in model.params.items()}
    if expected != actual:
        missing = set(expected) ^ set(actual)
        wrong = {n for n in set(expected) & set(actual) if expected[n] != actual[n]}
        raise CheckpointShapeError(
            f"{path}: parameter set mismatch (missing/extra: {sorted(missing)}, "
            f"wrong shapes: {sorted(wrong)})"
        )


def clone_config(config: ModelConfig, **overrides) -> ModelConfig:
    return replace(config, **overrides)
