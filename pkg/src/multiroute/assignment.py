"""Label assigners.

Two strategies feed the training losses: an injective minimum-cost match
between predictions and ground truths (solved with a shortest-augmenting-
path Hungarian), and a score-based one-to-many assigner that ranks
predictions per ground truth by a blend of class probability and IoU,
keeps the top K, and filters low-overlap pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry

# focal-style classification matching cost constants (shared with the loss)
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0

DEFAULT_COST_WEIGHTS = {"w_cls": 2.0, "w_l1": 5.0, "w_giou": 2.0}


@dataclass
class O2OAssignment:
    """Partial injective map gt index -> prediction index."""

    sigma: dict[int, int] = field(default_factory=dict)

    def pairs(self):
        """(pred, gt) pairs sorted by gt index."""
        return [(pred, gt) for gt, pred in sorted(self.sigma.items())]


@dataclass
class O2MAssignment:
    """Positive (prediction, gt) pairs; each prediction appears at most once."""

    positives: list[tuple[int, int]] = field(default_factory=list)

    def pairs(self):
        return list(self.positives)


def focal_cls_cost(probs_for_gt: np.ndarray) -> np.ndarray:
    """Matching cost of predicting each gt's class with probability p.

    Uses the focal-style cost: alpha*(1-p)^g*(-log p) - (1-alpha)*p^g*(-log(1-p)).
    """
    p = np.clip(probs_for_gt, 1e-12, 1.0 - 1e-12)
    pos = FOCAL_ALPHA * (1.0 - p) ** FOCAL_GAMMA * (-np.log(p))
    neg = (1.0 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * (-np.log(1.0 - p))
    return pos - neg


def o2o_cost_matrix(pred_probs, pred_boxes_cxcywh, gt_labels, gt_boxes_cxcywh,
                    weights=None) -> np.ndarray:
    """Cost matrix with rows = predictions, cols = ground truths.

    Entry (i, j) combines the focal classification cost of prediction i for
    gt j's class, the L1 distance between the center-size box vectors, and
    the GIoU complement, each scaled by its weight.
    """
    w = dict(DEFAULT_COST_WEIGHTS)
    if weights:
        w.update(weights)
    probs = np.asarray(pred_probs, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] < 1:
        raise ValueError(f"expected (n_pred, n_class) probs, got {probs.shape}")
    if not np.all(np.isfinite(probs)):
        raise ValueError("non-finite class probabilities")
    labels = np.asarray(gt_labels, dtype=np.int64)
    n_gt = len(labels)
    if n_gt == 0:
        return np.zeros((probs.shape[0], 0))
    pb = geometry.clamp_degenerate(pred_boxes_cxcywh)
    gb = np.asarray(gt_boxes_cxcywh, dtype=np.float64).reshape(n_gt, 4)
    cls_cost = focal_cls_cost(probs[:, labels])
    l1 = np.abs(pb[:, None, :] - gb[None, :, :]).sum(axis=-1)
    giou = geometry.giou_pairwise(geometry.cxcywh_to_xyxy(pb), geometry.cxcywh_to_xyxy(gb))
    return w["w_cls"] * cls_cost + w["w_l1"] * l1 + w["w_giou"] * (1.0 - giou)


def hungarian_match(cost: np.ndarray) -> O2OAssignment:
    """Minimum-total-cost injective assignment of every column (gt).

    Shortest-augmenting-path Hungarian with dual potentials, O(n^3).
    Requires at least as many rows (predictions) as columns. Ground truths
    are inserted in index order and row scans take the first minimum, so
    equal-cost alternatives resolve toward low (gt, pred) indices.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2D, got shape {cost.shape}")
    n_pred, n_gt = cost.shape
    if n_gt == 0:
        return O2OAssignment({})
    if n_pred < n_gt:
        raise ValueError(f"need #preds >= #gts, got {n_pred} < {n_gt}")
    if not np.all(np.isfinite(cost)):
        raise ValueError("non-finite entries in cost matrix")

    # classic 1-indexed formulation; slot 0 is the virtual unmatched column
    a = cost.T  # (n_gt, n_pred)
    u = np.zeros(n_gt + 1)
    v = np.zeros(n_pred + 1)
    owner = np.zeros(n_pred + 1, dtype=np.int64)  # pred slot -> gt (1-based, 0 = free)
    way = np.zeros(n_pred + 1, dtype=np.int64)
    for gi in range(1, n_gt + 1):
        owner[0] = gi
        j0 = 0
        minv = np.full(n_pred + 1, np.inf)
        used = np.zeros(n_pred + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = a[i0 - 1, :] - u[i0] - v[1:]
            improve = free & (reduced < minv[1:])
            minv[1:][improve] = reduced[improve]
            way[1:][improve] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j_prev = way[j0]
            owner[j0] = owner[j_prev]
            j0 = j_prev
    sigma = {}
    for j in range(1, n_pred + 1):
        if owner[j]:
            sigma[int(owner[j]) - 1] = j - 1
    return O2OAssignment(sigma)


def o2m_assign(scores: np.ndarray, ious: np.ndarray, alpha: float, k: int,
               tau: float) -> O2MAssignment:
    """Score-based one-to-many assignment.

    ``scores[i, j]`` is prediction i's probability for gt j's class and
    ``ious[i, j]`` the box overlap. The matching score blends the two:
    M = alpha * score + (1 - alpha) * IoU. Per gt, the top ``k`` candidates
    by M are kept (ties to the lower prediction index), pairs with
    IoU < tau are dropped, and a prediction claimed by several gts keeps
    only its highest-M pair (ties to the lower gt index).
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if not (0.0 <= tau <= 1.0):
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    scores = np.asarray(scores, dtype=np.float64)
    ious = np.asarray(ious, dtype=np.float64)
    if scores.shape != ious.shape:
        raise ValueError(f"scores {scores.shape} vs ious {ious.shape}")
    n_pred, n_gt = scores.shape if scores.ndim == 2 else (len(scores), 0)
    if n_gt == 0:
        return O2MAssignment([])
    m = alpha * scores + (1.0 - alpha) * ious

    best: dict[int, tuple[float, int]] = {}  # pred -> (M, gt) of its strongest claim
    for j in range(n_gt):
        col = m[:, j]
        order = np.lexsort((np.arange(n_pred), -col))
        for i in order[:k]:
            i = int(i)
            if ious[i, j] < tau:
                continue
            claim = (col[i], j)
            if i not in best:
                best[i] = claim
            else:
                cur_m, cur_j = best[i]
                if claim[0] > cur_m or (claim[0] == cur_m and j < cur_j):
                    best[i] = claim
    positives = sorted((i, gj) for i, (_, gj) in best.items())
    return O2MAssignment(positives)
