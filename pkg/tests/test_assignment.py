import itertools

import numpy as np
import pytest

from multiroute.assignment import (
    focal_cls_cost,
    hungarian_match,
    o2m_assign,
    o2o_cost_matrix,
)


def brute_force_min_cost(cost):
    n_pred, n_gt = cost.shape
    best = None
    for perm in itertools.permutations(range(n_pred), n_gt):
        total = sum(cost[perm[j], j] for j in range(n_gt))
        if best is None or total < best:
            best = total
    return best


def brute_force_o2m(scores, ious, alpha, k, tau):
    # independent re-derivation: per-gt top-k by M, tau filter, conflict by max M
    m = alpha * scores + (1 - alpha) * ious
    n_pred, n_gt = m.shape
    claims = {}
    for j in range(n_gt):
        ranked = sorted(range(n_pred), key=lambda i: (-m[i, j], i))[:k]
        for i in ranked:
            if ious[i, j] < tau:
                continue
            if i not in claims or (m[i, j], -j) > (claims[i][0], -claims[i][1]):
                claims[i] = (m[i, j], j)
    return sorted((i, j) for i, (_, j) in claims.items())


def test_cost_matrix_perfect_match_dominates():
    probs = np.array([[0.999999, 1e-6], [0.5, 0.5], [1e-6, 0.999999]])
    boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.5, 0.5, 0.4, 0.4], [0.7, 0.7, 0.2, 0.2]])
    gt_labels = [0, 1]
    gt_boxes = np.array([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]])
    cost = o2o_cost_matrix(probs, boxes, gt_labels, gt_boxes)
    assert np.argmin(cost[:, 0]) == 0
    assert np.argmin(cost[:, 1]) == 2


def test_cost_matrix_zero_geometric_residual():
    probs = np.array([[0.5, 0.5]])
    box = np.array([[0.4, 0.4, 0.3, 0.3]])
    cost = o2o_cost_matrix(probs, box, [1], box, weights={"w_cls": 0.0})
    assert abs(cost[0, 0]) <= 1e-12


def test_cost_matrix_l1_hand_case():
    probs = np.full((2, 2), 0.5)
    preds = np.array([[0.5, 0.5, 0.2, 0.2], [0.1, 0.1, 0.2, 0.2]])
    gts = np.array([[0.5, 0.5, 0.2, 0.2], [0.3, 0.1, 0.2, 0.2]])
    cost = o2o_cost_matrix(probs, preds, [0, 1], gts,
                           weights={"w_cls": 0.0, "w_l1": 1.0, "w_giou": 0.0})
    expected = np.array([[0.0, 0.2 + 0.4], [0.4 + 0.4, 0.2]])
    assert np.allclose(cost, expected, atol=1e-12)


def test_cost_matrix_empty_gts_and_bad_probs():
    probs = np.array([[0.5, 0.5]])
    box = np.array([[0.5, 0.5, 0.2, 0.2]])
    assert o2o_cost_matrix(probs, box, [], np.zeros((0, 4))).shape == (1, 0)
    with pytest.raises(ValueError):
        o2o_cost_matrix(np.array([[np.nan, 0.5]]), box, [0], box)


def test_hungarian_two_by_two():
    out = hungarian_match(np.array([[1.0, 2.0], [2.0, 1.0]]))
    assert out.sigma == {0: 0, 1: 1}


def test_hungarian_all_zero_tie_break():
    out = hungarian_match(np.zeros((4, 4)))
    assert out.sigma == {0: 0, 1: 1, 2: 2, 3: 3}


def test_hungarian_rectangular():
    cost = np.array([[5.0, 9.0], [1.0, 2.0], [9.0, 1.0]])
    out = hungarian_match(cost)
    assert out.sigma == {0: 1, 1: 2}


def test_hungarian_matches_bruteforce():
    rng = np.random.default_rng(31)
    for _ in range(300):
        n_gt = int(rng.integers(1, 7))
        n_pred = int(rng.integers(n_gt, n_gt + 4))
        cost = rng.normal(size=(n_pred, n_gt)) * 10
        out = hungarian_match(cost)
        assert sorted(out.sigma.keys()) == list(range(n_gt))
        preds = list(out.sigma.values())
        assert len(set(preds)) == len(preds)
        total = sum(cost[p, g] for g, p in out.sigma.items())
        assert np.isclose(total, brute_force_min_cost(cost), rtol=1e-12, atol=1e-9)


def test_hungarian_scale_invariance():
    rng = np.random.default_rng(32)
    cost = rng.random((6, 4)) + 0.1
    base = hungarian_match(cost).sigma
    assert hungarian_match(cost * 37.5).sigma == base


def test_hungarian_errors():
    with pytest.raises(ValueError):
        hungarian_match(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        hungarian_match(np.array([[np.inf, 0.0], [0.0, 1.0]]))
    assert hungarian_match(np.zeros((3, 0))).sigma == {}


def test_o2m_matching_score_value():
    # alpha=0.3, s=0.8, IoU=0.5 -> M = 0.59
    assert abs(0.3 * 0.8 + 0.7 * 0.5 - 0.59) <= 1e-12


def test_o2m_tau_filter_hand_case():
    # alpha=1 makes M equal the score column; IoU only filters
    scores = np.array([[0.9], [0.7], [0.6]])
    ious = np.array([[0.8], [0.35], [0.5]])
    out = o2m_assign(scores, ious, alpha=1.0, k=6, tau=0.4)
    assert out.positives == [(0, 0), (2, 0)]


def test_o2m_empty_gt():
    out = o2m_assign(np.zeros((4, 0)), np.zeros((4, 0)), alpha=0.3, k=6, tau=0.4)
    assert out.positives == []


def test_o2m_conflict_resolution():
    scores = np.array([[0.9, 0.8], [0.2, 0.1]])
    ious = np.ones((2, 2))
    out = o2m_assign(scores, ious, alpha=1.0, k=2, tau=0.0)
    # pred 0 claimed by both gts keeps gt 0 (higher M); pred 1 likewise
    assert out.positives == [(0, 0), (1, 0)]


def test_o2m_degenerates_to_argmax_iou():
    rng = np.random.default_rng(33)
    scores = rng.random((10, 3))
    ious = rng.random((10, 3))
    out = o2m_assign(scores, ious, alpha=0.0, k=1, tau=0.0)
    # per-gt argmax-IoU candidates, conflicts resolved toward the higher IoU
    expected = {}
    for j in range(3):
        i = int(np.argmax(ious[:, j]))
        if i not in expected or ious[i, j] > ious[i, expected[i]]:
            expected[i] = j
    assert out.positives == sorted(expected.items())


def test_o2m_matches_bruteforce_enumeration():
    rng = np.random.default_rng(34)
    for _ in range(200):
        n_pred = int(rng.integers(1, 12))
        n_gt = int(rng.integers(1, 5))
        scores = rng.random((n_pred, n_gt))
        ious = rng.random((n_pred, n_gt))
        alpha = float(rng.random())
        k = int(rng.integers(1, 8))
        tau = float(rng.random() * 0.8)
        got = o2m_assign(scores, ious, alpha, k, tau).positives
        assert got == brute_force_o2m(scores, ious, alpha, k, tau)
        # invariants: <= k per gt, IoU >= tau, each pred once
        per_gt = {}
        for i, j in got:
            per_gt[j] = per_gt.get(j, 0) + 1
            assert ious[i, j] >= tau
        assert all(c <= k for c in per_gt.values())
        preds = [i for i, _ in got]
        assert len(set(preds)) == len(preds)


def test_o2m_validation():
    s = np.zeros((2, 1))
    with pytest.raises(ValueError):
        o2m_assign(s, s, alpha=1.5, k=1, tau=0.0)
    with pytest.raises(ValueError):
        o2m_assign(s, s, alpha=0.5, k=0, tau=0.0)
    with pytest.raises(ValueError):
        o2m_assign(s, s, alpha=0.5, k=1, tau=2.0)


def test_focal_cls_cost_monotone():
    p = np.linspace(0.01, 0.99, 50)
    cost = focal_cls_cost(p)
    assert np.all(np.diff(cost) < 0)  # higher prob for the gt class = lower cost
