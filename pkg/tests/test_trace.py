"""Label-trace recursion vs the direct discounted-count sum."""

import numpy as np
import pytest

from prl.errors import ValidationError
from prl.trace import (
    batch_trace_update,
    trace_closed_form,
    trace_from_sequence,
    trace_init,
    trace_update,
)

GAMMAS = [0.0, 0.5, 0.67, 0.8, 0.9, 0.99]


def test_init_zero_vector():
    state = trace_init(5, 0.5)
    np.testing.assert_array_equal(state.t, np.zeros(5))


def test_init_rejects_bad_gamma():
    with pytest.raises(ValidationError):
        trace_init(3, 1.2)
    with pytest.raises(ValidationError):
        trace_init(3, -0.1)


def test_update_example_noun_verb_noun():
    # gamma 0.5, observe [N, V, N]: T(N) = 0.5^2 + 1, T(V) = 0.5
    state = trace_init(3, 0.5)
    for y in [0, 1, 0]:
        state = trace_update(state, y)
    np.testing.assert_allclose(state.t, [1.25, 0.5, 0.0])


def test_update_gamma_zero_is_one_hot_of_last():
    state = trace_init(4, 0.0)
    for y in [1, 2, 3, 0, 2]:
        state = trace_update(state, y)
        expected = np.zeros(4)
        expected[y] = 1.0
        np.testing.assert_array_equal(state.t, expected)


@pytest.mark.parametrize("gamma", [0.5, 0.8, 0.99])
def test_repeated_label_geometric_series(gamma):
    state = trace_init(2, gamma)
    for n in range(1, 30):
        state = trace_update(state, 1)
        assert state.t[1] == pytest.approx((1 - gamma**n) / (1 - gamma), rel=1e-12)


def test_update_rejects_out_of_range_label():
    with pytest.raises(IndexError):
        trace_update(trace_init(3, 0.5), 3)


def test_from_sequence_first_state_zero_and_shifted():
    labels = [2, 0, 1, 1, 0]
    states = trace_from_sequence(labels, 3, 0.5)
    assert len(states) == len(labels)
    np.testing.assert_array_equal(states[0].t, np.zeros(3))
    # entry i equals repeated updates over labels[:i]
    running = trace_init(3, 0.5)
    for i in range(1, len(labels)):
        running = trace_update(running, labels[i - 1])
        np.testing.assert_array_equal(states[i].t, running.t)


@pytest.mark.parametrize("gamma", GAMMAS)
def test_recursive_equals_closed_form_on_random_sequences(gamma):
    rng = np.random.default_rng(int(gamma * 100))
    for _ in range(25):
        k = int(rng.integers(2, 8))
        labels = rng.integers(0, k, size=int(rng.integers(1, 200)))
        states = trace_from_sequence(labels, k, gamma)
        for i in rng.choice(len(labels), size=min(10, len(labels)), replace=False):
            expected = trace_closed_form(labels, k, gamma, int(i))
            np.testing.assert_allclose(states[int(i)].t, expected, atol=1e-12)


@pytest.mark.parametrize("gamma", GAMMAS)
def test_label_sum_is_history_length_geometric(gamma):
    # sum over labels of T_t depends only on t: sum_k gamma^(t-k)
    rng = np.random.default_rng(5)
    labels = rng.integers(0, 4, size=50)
    state = trace_init(4, gamma)
    expected = 0.0
    for y in labels:
        state = trace_update(state, y)
        expected = gamma * expected + 1.0
        assert state.t.sum() == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("gamma", [0.5, 0.9, 0.99])
def test_boundedness(gamma):
    rng = np.random.default_rng(9)
    state = trace_init(3, gamma)
    for t in range(1, 1000):
        state = trace_update(state, int(rng.integers(0, 3)))
        assert state.t.max() <= min(t, 1.0 / (1.0 - gamma)) + 1e-12
        assert (state.t >= 0).all()


def test_batch_update_matches_scalar_update():
    rng = np.random.default_rng(21)
    traces = rng.random((6, 4))
    labels = rng.integers(0, 4, size=6)
    batched = batch_trace_update(traces.copy(), labels, 0.8)
    for b in range(6):
        from prl.trace import LabelTraceState

        single = trace_update(LabelTraceState(t=traces[b].copy(), gamma=0.8), labels[b])
        np.testing.assert_allclose(batched[b], single.t, atol=1e-15)
