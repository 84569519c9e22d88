"""Trainer contracts: update scope, clipping, determinism, convergence."""

import numpy as np
import pytest

from prl import autodiff as ad
from prl import model as m
from prl.corpus import TaggedCorpus, batchify, build_tagset, build_vocab
from prl.errors import TrainingDiverged, ValidationError
from prl.mdp import SequenceMdp, q_star
from prl.training import (
    GAMMA_GRID,
    TrainConfig,
    TrainState,
    aux_step,
    lm_step,
    sgd_update,
    train,
    window_traces,
)


def tiny_corpus():
    toks = "the cat sat on the mat".split()
    tags = ["D", "N", "V", "P", "D", "N"]
    vocab = build_vocab(toks)
    tagset = build_tagset(tags)
    sent = (
        np.array([vocab.token_to_id[t] for t in toks]),
        np.array([tagset.tag_to_id[g] for g in tags]),
    )
    return TaggedCorpus(sentences=[sent], vocab=vocab, tags=tagset)


def tiny_model(corpus, head="q", seed=0, **kw):
    cfg = m.ModelConfig(
        vocab_size=len(corpus.vocab),
        tag_size=len(corpus.tags),
        d_embed=12,
        lm_hidden=(16, 16, 16),
        aux_hidden=12,
        head_kind=head,
        **kw,
    )
    return m.init_model(cfg, corpus.vocab, corpus.tags, seed=seed)


def tiny_config(**kw):
    base = dict(
        lr=1.0,
        gamma_q=0.9,
        gamma_trace=0.5,
        batch_size=1,
        bptt_len=6,
        epochs=3,
        seed=0,
        clip_norm=1.0,
        dropout=0.0,
        eval_batch_size=1,
        lr_decay=1.0,
    )
    base.update(kw)
    return TrainConfig(**base)


def snapshot(model, group):
    return {n: model.params[n].data.copy() for n in model.param_names(group)}


def assert_same(model, saved):
    for n, arr in saved.items():
        np.testing.assert_array_equal(model.params[n].data, arr, err_msg=n)


def assert_changed(model, saved):
    assert any(not np.array_equal(model.params[n].data, arr) for n, arr in saved.items())


# -- config ---------------------------------------------------------------


def test_gamma_grid_enforced_unless_overridden():
    with pytest.raises(ValidationError):
        tiny_config(gamma_q=0.7)
    cfg = tiny_config(gamma_q=0.7, allow_nonstandard_gamma=True)
    assert cfg.gamma_q == 0.7
    for g in GAMMA_GRID:
        if g < 1.0:
            tiny_config(gamma_q=g)


def test_config_validation():
    with pytest.raises(ValidationError):
        tiny_config(lr=-1.0)
    with pytest.raises(ValidationError):
        tiny_config(dropout=1.0)
    with pytest.raises(ValidationError):
        tiny_config(eval_trace_mode="both")
    with pytest.raises(ValidationError):
        tiny_config(alternation_ratio=0)


# -- step scope -----------------------------------------------------------


def test_aux_step_touches_only_aux_and_encoder():
    corpus = tiny_corpus()
    model = tiny_model(corpus)
    config = tiny_config()
    batch = batchify(corpus, 1, 6)[0]
    state = TrainState.fresh(model, 1, np.random.default_rng(0))
    lm_before = snapshot(model, "lm")
    enc_before = snapshot(model, "encoder")
    aux_before = snapshot(model, "aux")
    aux_step(model, batch, config, state)
    assert_same(model, lm_before)
    assert_changed(model, aux_before)
    # encoder moves once head weights are nonzero; after one more step it must
    aux_step(model, batch, config, state)
    assert_changed(model, enc_before)


def test_lm_step_touches_only_lm_and_encoder():
    corpus = tiny_corpus()
    model = tiny_model(corpus)
    config = tiny_config()
    batch = batchify(corpus, 1, 6)[0]
    state = TrainState.fresh(model, 1, np.random.default_rng(0))
    aux_before = snapshot(model, "aux")
    lm_before = snapshot(model, "lm")
    enc_before = snapshot(model, "encoder")
    lm_step(model, batch, config, state)
    assert_same(model, aux_before)
    assert_changed(model, lm_before)
    assert_changed(model, enc_before)


def test_lm_step_descends_on_fixed_batch():
    corpus = tiny_corpus()
    model = tiny_model(corpus, head="none")
    config = tiny_config(lr=0.5)
    batch = batchify(corpus, 1, 6)[0]
    state = TrainState.fresh(model, 1, np.random.default_rng(0))
    loss1 = lm_step(model, batch, config, state)
    state.reset_streams(model, 1)
    loss2 = lm_step(model, batch, config, state)
    assert loss2 < loss1


def test_aux_step_memorizes_single_sentence_p_head():
    corpus = tiny_corpus()
    model = tiny_model(corpus, head="p")
    config = tiny_config()
    batch = batchify(corpus, 1, 6)[0]
    state = TrainState.fresh(model, 1, np.random.default_rng(0))
    acc = 0.0
    for step in range(200):
        aux_step(model, batch, config, state)
        with ad.no_grad():
            traces, _ = window_traces(np.zeros((1, len(corpus.tags))), batch.input_tags, 0.5)
            out = m.aux_forward(model, m.encode(model, batch.inputs), traces,
                                m.aux_init_carry(model, 1))
        acc = (out.predicted_tags == batch.target_tags).mean()
        if acc == 1.0:
            break
    assert acc == 1.0, f"did not memorize within 200 steps (acc={acc})"


def test_q_head_converges_to_q_star_on_single_sentence():
    corpus = tiny_corpus()
    model = tiny_model(corpus, head="q")
    config = tiny_config(lr=2.0, clip_norm=5.0, epochs=400)
    log = train(model, corpus, config, valid_corpus=corpus)
    batch = batchify(corpus, 1, 6)[0]
    with ad.no_grad():
        traces, _ = window_traces(np.zeros((1, len(corpus.tags))), batch.input_tags, 0.5)
        out = m.aux_forward(model, m.encode(model, batch.inputs), traces,
                            m.aux_init_carry(model, 1))
    mdp = SequenceMdp(gold=batch.target_tags[0], num_tags=len(corpus.tags), gamma=0.9)
    assert np.abs(out.logits.data - q_star(mdp)).max() < 0.05


# -- clipping ---------------------------------------------------------------


def test_clip_bounds_applied_step():
    t = ad.Tensor(np.zeros(4), requires_grad=True)
    t.grad = np.full(4, 10.0)
    norm = sgd_update([t], lr=1.0, clip_norm=1.0)
    assert norm == pytest.approx(20.0)
    # post-clip step has norm lr * clip
    assert np.linalg.norm(t.data) == pytest.approx(1.0, abs=1e-12)


def test_clip_inactive_below_threshold():
    t = ad.Tensor(np.zeros(4), requires_grad=True)
    t.grad = np.full(4, 0.1)
    sgd_update([t], lr=1.0, clip_norm=100.0)
    np.testing.assert_allclose(t.data, -np.full(4, 0.1))


# -- train loop --------------------------------------------------------------


def test_baseline_train_has_no_aux_records():
    corpus = tiny_corpus()
    model = tiny_model(corpus, head="none")
    log = train(model, corpus, tiny_config(epochs=2), valid_corpus=corpus)
    assert all(r.train_aux_loss is None for r in log.records)
    assert all(r.valid_tag_accuracy is None for r in log.records)


def test_train_determinism_same_seed_bit_exact():
    corpus = tiny_corpus()
    logs = []
    for _ in range(2):
        model = tiny_model(corpus, head="q", seed=3)
        logs.append(train(model, corpus, tiny_config(epochs=3, seed=3), valid_corpus=corpus))
    assert logs[0].core_rows() == logs[1].core_rows()


def test_train_different_seed_differs():
    corpus = tiny_corpus()
    l1 = train(tiny_model(corpus, seed=1), corpus, tiny_config(epochs=2, seed=1), valid_corpus=corpus)
    l2 = train(tiny_model(corpus, seed=2), corpus, tiny_config(epochs=2, seed=2), valid_corpus=corpus)
    assert l1.core_rows() != l2.core_rows()


def test_train_restores_best_params():
    corpus = tiny_corpus()
    model = tiny_model(corpus, head="none", seed=0)
    config = tiny_config(epochs=5)
    log = train(model, corpus, config, valid_corpus=corpus)
    from prl.evaluation import evaluate_model

    report = evaluate_model(model, corpus, batch_size=1, bptt_len=6)
    assert report.ppl == pytest.approx(log.best_valid_ppl, rel=1e-12)


def test_divergence_aborts_with_partial_log():
    corpus = tiny_corpus()
    model = tiny_model(corpus, head="none")
    # absurd lr without clipping blows the loss up
    config = tiny_config(lr=1e6, clip_norm=0.0, epochs=10)
    with pytest.raises(TrainingDiverged) as err:
        train(model, corpus, config, valid_corpus=corpus)
    assert hasattr(err.value, "log")


def test_alternation_ratio_skips_aux_updates():
    corpus = tiny_corpus()

    def run(ratio):
        model = tiny_model(corpus, head="p", seed=1)
        config = tiny_config(epochs=1, alternation_ratio=ratio, bptt_len=2, batch_size=1)
        train(model, corpus, config, valid_corpus=corpus)
        return model

    # bptt 2 over a 7-token stream -> 3 windows; ratio 4 -> aux update only on window 0
    m1 = run(1)
    m4 = run(4)
    assert not np.array_equal(
        m1.params["aux.head.W"].data, m4.params["aux.head.W"].data
    )


def test_trainlog_csv_round_trip(tmp_path):
    corpus = tiny_corpus()
    model = tiny_model(corpus, head="q")
    log = train(model, corpus, tiny_config(epochs=2), valid_corpus=corpus)
    path = tmp_path / "log.csv"
    log.to_csv(path)
    lines = path.read_text().strip().split("\n")
    assert lines[0].startswith("epoch,train_lm_loss")
    assert len(lines) == 3
    # values parse back to the same floats
    row = lines[1].split(",")
    assert float(row[5]) == log.records[0].valid_ppl


def test_window_traces_strictly_before_semantics():
    tags = np.array([[0, 1, 0, 2]])
    traces, carry = window_traces(np.zeros((1, 3)), tags, 0.5)
    np.testing.assert_array_equal(traces[0, 0], [0, 0, 0])
    np.testing.assert_array_equal(traces[0, 1], [1, 0, 0])
    np.testing.assert_allclose(traces[0, 2], [0.5, 1.0, 0.0])
    np.testing.assert_allclose(traces[0, 3], [1.25, 0.5, 0.0])
    np.testing.assert_allclose(carry, [[0.625, 0.25, 1.0]])
