"""Tagged corpora: vocabulary building, file ingestion, HMM generation,
and continuous-stream BPTT batching.

Corpus files are CoNLL-like UTF-8 text: one ``token<TAB>tag`` pair per
line, a blank line ends a sentence, ``#``-prefixed lines are comments.
When a corpus is flattened into batch streams, an eos token with its
dedicated eos tag is inserted after every sentence.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, ParseError, SchemaError, ValidationError

__all__ = [
    "UNK_TOKEN",
    "EOS_TOKEN",
    "EOS_TAG",
    "Vocab",
    "TagSet",
    "TaggedCorpus",
    "BpttBatch",
    "HmmSpec",
    "HmmAnalyticReport",
    "build_vocab",
    "build_tagset",
    "load_conll",
    "save_conll",
    "generate_hmm_corpus",
    "block_hmm_spec",
    "batchify",
    "split_corpus",
    "truncate_corpus",
]

UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"
EOS_TAG = "<eos>"


@dataclass(frozen=True)
class Vocab:
    """Bijective token<->id map with unk and eos always present."""

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int]
    unk_id: int
    eos_id: int

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, self.unk_id)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.id_to_token == other.id_to_token

    def __hash__(self):
        return hash(self.id_to_token)


@dataclass(frozen=True)
class TagSet:
    """Bijective tag<->id map; the eos tag is always the last id."""

    id_to_tag: tuple[str, ...]
    tag_to_id: dict[str, int]
    eos_tag_id: int

    def __len__(self) -> int:
        return len(self.id_to_tag)

    def id_of(self, tag: str) -> int:
        if tag not in self.tag_to_id:
            raise SchemaError(f"tag {tag!r} not in tag set {self.id_to_tag}")
        return self.tag_to_id[tag]

    def __eq__(self, other) -> bool:
        return isinstance(other, TagSet) and self.id_to_tag == other.id_to_tag

    def __hash__(self):
        return hash(self.id_to_tag)


@dataclass(eq=False)
class TaggedCorpus:
    """Sentences of aligned (token_id, tag_id) arrays plus their maps."""

    sentences: list[tuple[np.ndarray, np.ndarray]]
    vocab: Vocab
    tags: TagSet

    def __post_init__(self):
        for i, (tok, tag) in enumerate(self.sentences):
            if tok.shape != tag.shape or tok.ndim != 1:
                raise ValidationError(f"sentence {i}: token/tag arrays misaligned")
            if tok.size == 0:
                raise ValidationError(f"sentence {i} is empty")

    @property
    def num_tokens(self) -> int:
        """Token count of the flattened stream, eos markers included."""
        return sum(t.size + 1 for t, _ in self.sentences)

    def flatten(self) -> tuple[np.ndarray, np.ndarray]:
        """One continuous stream with eos (and its tag) after each sentence."""
        toks, tags = [], []
        for t, g in self.sentences:
            toks.append(t)
            toks.append(np.array([self.vocab.eos_id], dtype=np.int64))
            tags.append(g)
            tags.append(np.array([self.tags.eos_tag_id], dtype=np.int64))
        return np.concatenate(toks), np.concatenate(tags)


def build_vocab(tokens, max_size: int | None = None, min_count: int = 1) -> Vocab:
    """Keep the most frequent tokens (ties by first occurrence); inject specials."""
    counts: Counter[str] = Counter()
    first_seen: dict[str, int] = {}
    n = 0
    for tok in tokens:
        counts[tok] += 1
        if tok not in first_seen:
            first_seen[tok] = n
        n += 1
    if not counts:
        raise InputError("cannot build a vocabulary from an empty token stream")
    ordered = sorted(counts, key=lambda t: (-counts[t], first_seen[t]))
    kept = [t for t in ordered if counts[t] >= min_count and t not in (UNK_TOKEN, EOS_TOKEN)]
    if max_size is not None:
        kept = kept[:max_size]
    id_to_token = (UNK_TOKEN, EOS_TOKEN, *kept)
    token_to_id = {t: i for i, t in enumerate(id_to_token)}
    return Vocab(id_to_token=id_to_token, token_to_id=token_to_id, unk_id=0, eos_id=1)


def build_tagset(tags) -> TagSet:
    """Tag set from observed tags in first-occurrence order, eos tag appended."""
    seen: dict[str, None] = {}
    for tag in tags:
        if tag != EOS_TAG:
            seen[tag] = None
    id_to_tag = (*seen.keys(), EOS_TAG)
    if len(id_to_tag) < 2:
        raise ValidationError("a tag set needs at least one non-eos tag")
    return TagSet(
        id_to_tag=id_to_tag,
        tag_to_id={t: i for i, t in enumerate(id_to_tag)},
        eos_tag_id=len(id_to_tag) - 1,
    )


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------


def load_conll(path, vocab: Vocab | None = None, tags: TagSet | None = None) -> TaggedCorpus:
    """Parse a token<TAB>tag file into a corpus.

    With a supplied vocab, out-of-vocabulary tokens map to unk; with a
    supplied tag set, an unknown tag is a SchemaError (silently corrupted
    tags would poison the action-value targets). Without either, maps are
    built from the file itself (every token kept, so save/load round-trips).
    """
    sentences_raw: list[list[tuple[str, str]]] = []
    current: list[tuple[str, str]] = []
    with open(path, "r", encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if line.startswith("#"):
                continue
            if not line.strip():
                if current:
                    sentences_raw.append(current)
                    current = []
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError(f"{path}: line {lineno}: expected 'token<TAB>tag', got {line!r}")
            current.append((parts[0], parts[1]))
    if current:
        sentences_raw.append(current)
    if not sentences_raw:
        raise InputError(f"{path}: no sentences found")

    if vocab is None:
        vocab = build_vocab(tok for sent in sentences_raw for tok, _ in sent)
    if tags is None:
        tags = build_tagset(tag for sent in sentences_raw for _, tag in sent)

    sentences = []
    for sent in sentences_raw:
        tok_ids = np.array([vocab.id_of(tok) for tok, _ in sent], dtype=np.int64)
        tag_ids = np.array([tags.id_of(tag) for _, tag in sent], dtype=np.int64)
        sentences.append((tok_ids, tag_ids))
    return TaggedCorpus(sentences=sentences, vocab=vocab, tags=tags)


def save_conll(corpus: TaggedCorpus, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok_ids, tag_ids in corpus.sentences:
            for tok, tag in zip(tok_ids, tag_ids):
                fh.write(f"{corpus.vocab.id_to_token[tok]}\t{corpus.tags.id_to_tag[tag]}\n")
            fh.write("\n")


# ---------------------------------------------------------------------------
# synthetic HMM corpora
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HmmSpec:
    """Hidden Markov corpus generator spec.

    emissions[i] maps token string -> emission probability under state i;
    transitions is row-stochastic KxK. The hidden state is emitted as the
    tag of every sampled token, so the tags of these corpora provably
    carry next-word information.
    """

    num_states: int
    emissions: tuple[dict[str, float], ...]
    transitions: np.ndarray
    seed: int
    length: int

    def __post_init__(self):
        trans = np.asarray(self.transitions, dtype=np.float64)
        object.__setattr__(self, "transitions", trans)
        if self.num_states < 1:
            raise ValidationError("need at least one state")
        if len(self.emissions) != self.num_states:
            raise ValidationError(
                f"{len(self.emissions)} emission rows for {self.num_states} states"
            )
        if trans.shape != (self.num_states, self.num_states):
            raise ValidationError(f"transition matrix shape {trans.shape} is not square K x K")
        if (trans < 0).any():
            raise ValidationError("transition probabilities must be non-negative")
        for i, row in enumerate(trans):
            if abs(math.fsum(row.tolist()) - 1.0) > 1e-12:
                raise ValidationError(f"transition row {i} sums to {math.fsum(row.tolist())}, not 1")
        for i, em in enumerate(self.emissions):
            if not em:
                raise ValidationError(f"state {i} has an empty emission distribution")
            if any(p < 0 for p in em.values()):
                raise ValidationError(f"state {i} has negative emission probabilities")
            if abs(math.fsum(em.values()) - 1.0) > 1e-12:
                raise ValidationError(f"emission row {i} sums to {math.fsum(em.values())}, not 1")
        if self.length < 2:
            raise ValidationError("corpus length must be at least 2 tokens")

    @classmethod
    def from_json(cls, path) -> "HmmSpec":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        try:
            return cls(
                num_states=int(doc["states"]),
                emissions=tuple(dict(e) for e in doc["emissions"]),
                transitions=np.asarray(doc["transitions"], dtype=np.float64),
                seed=int(doc["seed"]),
                length=int(doc["length"]),
            )
        except KeyError as exc:
            raise SchemaError(f"{path}: missing HMM spec key {exc}") from None

    def to_json(self, path) -> None:
        doc = {
            "states": self.num_states,
            "emissions": [dict(e) for e in self.emissions],
            "transitions": self.transitions.tolist(),
            "seed": self.seed,
            "length": self.length,
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")


@dataclass
class HmmAnalyticReport:
    """Exact reference perplexities for a sampled HMM corpus.

    tag_oracle_ppl: expected one-step predictive perplexity of a predictor
    that knows the current hidden state (closed form over the stationary
    distribution). filter_ppl: perplexity of the exact forward-algorithm
    filter evaluated on the sampled token stream. unigram_ppl: stationary
    marginal over tokens. The word stream itself excludes eos markers.
    """

    tag_oracle_ppl: float
    tag_oracle_ppl_on_sample: float
    filter_ppl: float
    unigram_ppl: float
    stationary: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "tag_oracle_ppl": self.tag_oracle_ppl,
            "tag_oracle_ppl_on_sample": self.tag_oracle_ppl_on_sample,
            "filter_ppl": self.filter_ppl,
            "unigram_ppl": self.unigram_ppl,
            "stationary": self.stationary,
        }


def _stationary_distribution(trans: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eig(trans.T)
    idx = int(np.argmin(np.abs(vals - 1.0)))
    pi = np.real(vecs[:, idx])
    pi = np.abs(pi)
    return pi / pi.sum()


def generate_hmm_corpus(spec: HmmSpec) -> tuple[TaggedCorpus, HmmAnalyticReport]:
    """Sample a corpus from the HMM; tags are the hidden states.

    The sample is one long sentence, so batching inserts a single eos at
    the very end and the analytic floors stay representative of the
    stream. Deterministic in the seed.
    """
    rng = np.random.default_rng(spec.seed)
    k = spec.num_states

    vocab_tokens: list[str] = []
    seen: set[str] = set()
    for em in spec.emissions:
        for tok in em:
            if tok not in seen:
                seen.add(tok)
                vocab_tokens.append(tok)
    token_index = {tok: i for i, tok in enumerate(vocab_tokens)}
    v = len(vocab_tokens)

    emit = np.zeros((k, v), dtype=np.float64)
    for i, em in enumerate(spec.emissions):
        for tok, p in em.items():
            emit[i, token_index[tok]] = p

    pi = _stationary_distribution(spec.transitions)

    # sample the state chain, then tokens grouped by state
    states = np.empty(spec.length, dtype=np.int64)
    trans_cum = np.cumsum(spec.transitions, axis=1)
    states[0] = int(rng.choice(k, p=pi))
    u = rng.random(spec.length)
    for t in range(1, spec.length):
        states[t] = min(np.searchsorted(trans_cum[states[t - 1]], u[t]), k - 1)
    tokens = np.empty(spec.length, dtype=np.int64)
    emit_cum = np.cumsum(emit, axis=1)
    for s in range(k):
        pos = np.nonzero(states == s)[0]
        if pos.size:
            tokens[pos] = np.minimum(np.searchsorted(emit_cum[s], rng.random(pos.size)), v - 1)

    # analytic tag-oracle floor: exp of expected next-word entropy given the state
    next_word = spec.transitions @ emit  # [K, V] one-step predictive per state
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -np.where(next_word > 0, next_word * np.log(next_word), 0.0).sum(axis=1)
    tag_oracle_ppl = float(np.exp(pi @ ent))

    # realized floors on this sample
    nll_oracle = -np.log(next_word[states[:-1], tokens[1:]]).mean()
    alpha = pi * emit[:, tokens[0]]
    alpha /= alpha.sum()
    nll_filter = 0.0
    for t in range(1, spec.length):
        pred = alpha @ next_word  # p(w_t | w_<t)
        p_tok = pred[tokens[t]]
        nll_filter -= np.log(p_tok)
        alpha = (alpha @ spec.transitions) * emit[:, tokens[t]]
        alpha /= alpha.sum()
    nll_filter /= spec.length - 1

    marginal = pi @ emit
    unigram_ppl = float(np.exp(-(marginal[marginal > 0] * np.log(marginal[marginal > 0])).sum()))

    vocab = build_vocab(vocab_tokens)
    tags = build_tagset(f"s{i}" for i in range(k))
    tok_ids = np.array([vocab.token_to_id[vocab_tokens[t]] for t in tokens], dtype=np.int64)
    tag_ids = states.copy()  # state i is tag id i by construction order
    corpus = TaggedCorpus(sentences=[(tok_ids, tag_ids)], vocab=vocab, tags=tags)
    report = HmmAnalyticReport(
        tag_oracle_ppl=tag_oracle_ppl,
        tag_oracle_ppl_on_sample=float(np.exp(nll_oracle)),
        filter_ppl=float(np.exp(nll_filter)),
        unigram_ppl=unigram_ppl,
        stationary=pi.tolist(),
    )
    return corpus, report


def block_hmm_spec(
    num_states: int,
    words_per_state: int,
    stay_prob: float,
    seed: int,
    length: int,
    overlap: float = 0.0,
) -> HmmSpec:
    """Convenience builder: per-state word blocks with optional leakage.

    Each state emits its own block with weight (1 - overlap) spread
    uniformly, plus `overlap` spread uniformly over the whole vocabulary.
    Off-diagonal transition mass is split evenly. overlap > 0 makes the
    state only partially observable from the current word.
    """
    if not (0.0 < stay_prob <= 1.0) or not (0.0 <= overlap < 1.0):
        raise ValidationError("need 0 < stay_prob <= 1 and 0 <= overlap < 1")
    v = num_states * words_per_state
    off = (1.0 - stay_prob) / (num_states - 1) if num_states > 1 else 0.0
    trans = np.full((num_states, num_states), off, dtype=np.float64)
    np.fill_diagonal(trans, stay_prob if num_states > 1 else 1.0)
    words = [f"w{i:03d}" for i in range(v)]
    emissions = []
    for s in range(num_states):
        block = words[s * words_per_state : (s + 1) * words_per_state]
        em = dict.fromkeys(words, overlap / v) if overlap > 0 else {}
        for w in block:
            em[w] = em.get(w, 0.0) + (1.0 - overlap) / words_per_state
        # renormalize exactly to absorb float error
        total = math.fsum(em.values())
        em = {w: p / total for w, p in em.items()}
        emissions.append(em)
    return HmmSpec(
        num_states=num_states,
        emissions=tuple(emissions),
        transitions=trans,
        seed=seed,
        length=length,
    )


# ---------------------------------------------------------------------------
# batching
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class BpttBatch:
    """One BPTT window over B parallel streams.

    inputs/targets/target_tags/input_tags are [B, L]; target[b, t] is the
    stream successor of input[b, t] and target_tags[b, t] its tag (the tag
    of the *next* word). input_tags carry the tag of each input token so
    the label trace can be advanced. reset[b] marks a stream start where
    carried state must be cleared.
    """

    inputs: np.ndarray
    targets: np.ndarray
    target_tags: np.ndarray
    input_tags: np.ndarray
    reset: np.ndarray
    final: bool = False


def batchify(corpus: TaggedCorpus, batch_size: int, bptt_len: int) -> list[BpttBatch]:
    """Split the flattened stream into B continuous streams of L-sized windows.

    Consecutive windows continue each stream, so hidden state and label
    trace can be carried across them. Trailing tokens that do not fill a
    window are dropped.
    """
    if batch_size < 1 or bptt_len < 1:
        raise ValidationError("batch_size and bptt_len must be positive")
    tokens, tags = corpus.flatten()
    n = tokens.shape[0]
    if n < batch_size * (bptt_len + 1):
        raise InputError(
            f"corpus has {n} tokens; need at least batch_size*(bptt_len+1) = "
            f"{batch_size * (bptt_len + 1)}"
        )
    stream_len = n // batch_size
    tok_mat = tokens[: stream_len * batch_size].reshape(batch_size, stream_len)
    tag_mat = tags[: stream_len * batch_size].reshape(batch_size, stream_len)
    num_windows = (stream_len - 1) // bptt_len
    batches = []
    for w in range(num_windows):
        lo = w * bptt_len
        hi = lo + bptt_len
        batches.append(
            BpttBatch(
                inputs=tok_mat[:, lo:hi],
                targets=tok_mat[:, lo + 1 : hi + 1],
                target_tags=tag_mat[:, lo + 1 : hi + 1],
                input_tags=tag_mat[:, lo:hi],
                reset=np.full(batch_size, w == 0, dtype=bool),
                final=w == num_windows - 1,
            )
        )
    return batches


def split_corpus(corpus: TaggedCorpus, valid_tokens: int) -> tuple[TaggedCorpus, TaggedCorpus]:
    """Split off the last `valid_tokens` word positions into a second corpus.

    Sentences are cut at the boundary when necessary; both halves share
    the vocab and tag set.
    """
    total = sum(t.size for t, _ in corpus.sentences)
    if not (0 < valid_tokens < total):
        raise ValidationError(f"valid_tokens must lie in (0, {total}), got {valid_tokens}")
    train_budget = total - valid_tokens
    train_sents, valid_sents = [], []
    used = 0
    for tok, tag in corpus.sentences:
        if used >= train_budget:
            valid_sents.append((tok, tag))
        elif used + tok.size <= train_budget:
            train_sents.append((tok, tag))
        else:
            cut = train_budget - used
            train_sents.append((tok[:cut], tag[:cut]))
            valid_sents.append((tok[cut:], tag[cut:]))
        used += tok.size
    return (
        TaggedCorpus(sentences=train_sents, vocab=corpus.vocab, tags=corpus.tags),
        TaggedCorpus(sentences=valid_sents, vocab=corpus.vocab, tags=corpus.tags),
    )


def truncate_corpus(corpus: TaggedCorpus, num_tokens: int) -> TaggedCorpus:
    """First `num_tokens` word positions of the corpus (for size sweeps)."""
    kept, used = [], 0
    for tok, tag in corpus.sentences:
        if used >= num_tokens:
            break
        take = min(tok.size, num_tokens - used)
        kept.append((tok[:take], tag[:take]))
        used += take
    if used < num_tokens:
        raise InputError(f"corpus has only {used} word tokens, cannot take {num_tokens}")
    return TaggedCorpus(sentences=kept, vocab=corpus.vocab, tags=corpus.tags)
