"""Chain-MDP oracle values, backup targets, and their fixed point."""

import numpy as np
import pytest

from prl import autodiff as ad
from prl.errors import NumericError, ValidationError
from prl.mdp import (
    SequenceMdp,
    q_learning_targets,
    q_star,
    q_star_closed_form,
    stream_q_targets,
    td_loss,
)

GAMMAS = [0.0, 0.5, 0.67, 0.8, 0.9, 0.99]


def _mdp(gold, gamma, k=None):
    gold = np.asarray(gold)
    return SequenceMdp(gold=gold, num_tags=k or int(gold.max()) + 1, gamma=gamma)


def test_q_star_three_positions():
    q = q_star(_mdp([0, 1, 0], 0.9, k=3))
    np.testing.assert_allclose(q[np.arange(3), [0, 1, 0]], [2.71, 1.9, 1.0])
    wrong = q.copy()
    wrong[np.arange(3), [0, 1, 0]] = 0.0
    assert (wrong == 0).all()


def test_q_star_gamma_zero_is_myopic():
    q = q_star(_mdp([2, 0, 1, 1], 0.0, k=3))
    assert set(np.unique(q)) == {0.0, 1.0}
    np.testing.assert_array_equal(q[np.arange(4), [2, 0, 1, 1]], np.ones(4))


def test_q_star_position_zero_geometric():
    q = q_star(_mdp([0] * 5, 0.9, k=2))
    assert q[0, 0] == pytest.approx(4.0951)


@pytest.mark.parametrize("gamma", GAMMAS)
@pytest.mark.parametrize("length", [1, 2, 7, 23, 50])
def test_value_iteration_matches_closed_form(gamma, length):
    rng = np.random.default_rng(length)
    mdp = _mdp(rng.integers(0, 5, size=length), gamma, k=5)
    np.testing.assert_allclose(q_star(mdp), q_star_closed_form(mdp), atol=1e-12)


def test_q_star_argmax_is_gold_everywhere():
    rng = np.random.default_rng(31)
    for gamma in [0.5, 0.9, 0.99]:
        mdp = _mdp(rng.integers(0, 4, size=20), gamma, k=4)
        np.testing.assert_array_equal(np.argmax(q_star(mdp), axis=1), mdp.gold)


def test_q_star_bounds():
    mdp = _mdp([1, 0, 1, 0, 1], 0.9, k=2)
    q = q_star(mdp)
    assert (q >= 0).all()
    assert q.max() <= (1 - 0.9**5) / (1 - 0.9) + 1e-12


def test_targets_zero_prediction_gives_unit_gold():
    mdp = _mdp([0, 1, 2], 0.9, k=3)
    targets, mask = q_learning_targets(np.zeros((3, 3)), mdp)
    assert mask.all()
    expected = np.zeros((3, 3))
    expected[np.arange(3), [0, 1, 2]] = 1.0
    np.testing.assert_array_equal(targets, expected)


@pytest.mark.parametrize("gamma", [0.0, 0.5, 0.9])
def test_q_star_is_fixed_point_of_targets(gamma):
    rng = np.random.default_rng(41)
    mdp = _mdp(rng.integers(0, 4, size=12), gamma, k=4)
    qs = q_star(mdp)
    targets, mask = q_learning_targets(qs, mdp)
    assert mask.all()
    np.testing.assert_allclose(targets, qs, atol=1e-12)


def test_last_position_terminal_target_is_one():
    rng = np.random.default_rng(43)
    mdp = _mdp([2, 1], 0.99, k=3)
    targets, _ = q_learning_targets(rng.normal(size=(2, 3)) ** 2, mdp)
    assert targets[1, 1] == 1.0


def test_truncated_window_masks_or_bootstraps_last_position():
    gold = np.array([0, 1])
    mdp = SequenceMdp(gold=gold, num_tags=3, gamma=0.5, terminal_at_end=False)
    q_pred = np.zeros((2, 3))
    targets, mask = q_learning_targets(q_pred, mdp)
    assert mask[0] and not mask[1]

    targets, mask = q_learning_targets(q_pred, mdp, bootstrap_row=np.array([4.0, 0.0, 0.0]))
    assert mask.all()
    assert targets[1, 1] == pytest.approx(1.0 + 0.5 * 4.0)


def test_targets_monotone_below_q_star():
    rng = np.random.default_rng(47)
    for _ in range(20):
        mdp = _mdp(rng.integers(0, 3, size=10), 0.9, k=3)
        qs = q_star(mdp)
        q_pred = qs * rng.random(qs.shape)  # elementwise <= Q*
        targets, _ = q_learning_targets(q_pred, mdp)
        assert (targets <= qs + 1e-12).all()


@pytest.mark.parametrize("gamma", GAMMAS)
def test_iterated_targets_converge_to_q_star(gamma):
    rng = np.random.default_rng(53)
    mdp = _mdp(rng.integers(0, 4, size=30), gamma, k=4)
    qs = q_star(mdp)
    q = rng.normal(scale=2.0, size=qs.shape)
    for i in range(200):
        q, mask = q_learning_targets(q, mdp)
        assert mask.all()
        if np.abs(q - qs).max() < 1e-8:
            break
    assert np.abs(q - qs).max() < 1e-8, f"not converged for gamma={gamma}"


def test_targets_reject_nan():
    mdp = _mdp([0, 1], 0.5, k=2)
    bad = np.zeros((2, 2))
    bad[0, 0] = np.nan
    with pytest.raises(NumericError):
        q_learning_targets(bad, mdp)


def test_stream_targets_match_per_sentence_backup():
    rng = np.random.default_rng(59)
    length, batch, k = 7, 3, 4
    q_pred = rng.normal(size=(length, batch, k)) ** 2
    gold = rng.integers(0, k, size=(length, batch))
    targets, mask = stream_q_targets(q_pred, gold, 0.8, terminal=True)
    for b in range(batch):
        mdp = SequenceMdp(gold=gold[:, b], num_tags=k, gamma=0.8)
        t_b, m_b = q_learning_targets(q_pred[:, b], mdp)
        np.testing.assert_allclose(targets[:, b], t_b, atol=1e-12)
        np.testing.assert_array_equal(mask[:, b], m_b)


def test_stream_targets_bootstrap_row():
    rng = np.random.default_rng(61)
    q_pred = np.zeros((2, 2, 3))
    gold = np.array([[0, 1], [2, 0]])
    boot = rng.random((2, 3))
    targets, mask = stream_q_targets(q_pred, gold, 0.9, bootstrap=boot)
    assert mask.all()
    np.testing.assert_allclose(
        targets[1, np.arange(2), gold[1]], 1.0 + 0.9 * boot.max(axis=1)
    )


def test_td_loss_zero_at_targets_and_single_delta():
    targets = np.array([[1.0, 0.0], [0.5, 0.0]])
    assert float(td_loss(ad.Tensor(targets.copy()), targets).data) == 0.0

    off = targets.copy()
    off[0, 1] += 0.3
    loss = td_loss(ad.Tensor(off), targets)
    assert float(loss.data) == pytest.approx(0.3**2 / 4)


def test_td_loss_gradient_finite_differences():
    rng = np.random.default_rng(67)
    q = ad.Tensor(rng.normal(size=(5, 3)))
    targets = rng.normal(size=(5, 3))
    mask = np.array([True, True, False, True, True])
    rep = ad.grad_check(lambda t: td_loss(t, targets, mask), q, step=1e-5, tolerance=1e-4)
    assert rep.passed, rep.max_rel_err


def test_mdp_validation():
    with pytest.raises(ValidationError):
        SequenceMdp(gold=np.array([0, 1]), num_tags=2, gamma=1.0)
    with pytest.raises(ValidationError):
        SequenceMdp(gold=np.array([5]), num_tags=2, gamma=0.5)
    with pytest.raises(ValidationError):
        q_star(SequenceMdp(gold=np.array([0]), num_tags=2, gamma=0.5, terminal_at_end=False))
