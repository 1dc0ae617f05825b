"""Training objectives and inference-time score calibration.

Assignments are discrete, so each step first builds a ``plan`` from the
detached predictions (one assignment per layer, route, and scene, plus the
frozen IoU targets for the score head), then the differentiable loss is
assembled against that plan. Gradient checks reuse a fixed plan, which is
exactly the function whose gradient the tape computes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import geometry
from .assignment import (
    DEFAULT_COST_WEIGHTS,
    O2MAssignment,
    O2OAssignment,
    hungarian_match,
    o2m_assign,
    o2o_cost_matrix,
)
from .autodiff import Tensor

FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


@dataclass
class LossWeights:
    lambda_cls: float = 1.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_aux: float = 1.0
    phi: float = 0.0               # calibration exponent; 0 ranks by the IoU score
    vfl_alpha: float = 0.75
    vfl_gamma: float = 2.0

    def validate(self) -> None:
        for name in ("lambda_cls", "lambda_l1", "lambda_giou", "lambda_aux",
                     "vfl_alpha", "vfl_gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 <= self.phi <= 1.0):
            raise ValueError(f"phi must be in [0, 1], got {self.phi}")


@dataclass
class AssignerConfig:
    alpha: float = 0.3
    k: int = 6
    tau: float = 0.4
    cost_weights: dict = field(default_factory=lambda: dict(DEFAULT_COST_WEIGHTS))


def calibrate_score(s_cls, s_iou, phi: float):
    """Blend classification and IoU-score confidences: s_cls^phi * s_iou^(1-phi).

    numpy defines 0^0 = 1, so the boundaries are exact: phi=0 returns
    s_iou, phi=1 returns s_cls.
    """
    s_cls = np.asarray(s_cls, dtype=np.float64)
    s_iou = np.asarray(s_iou, dtype=np.float64)
    if np.any(s_cls < 0) or np.any(s_cls > 1) or np.any(s_iou < 0) or np.any(s_iou > 1):
        raise ValueError("calibrate_score inputs must lie in [0, 1]")
    if not (0.0 <= phi <= 1.0):
        raise ValueError(f"phi must be in [0, 1], got {phi}")
    out = s_cls ** phi * s_iou ** (1.0 - phi)
    return float(out) if out.ndim == 0 else out


def giou_pairs(pred_cxcywh: Tensor, gt_xyxy: np.ndarray) -> Tensor:
    """Differentiable GIoU between matched (prediction, gt) pairs.

    ``pred_cxcywh`` is (P, 4) on the tape; ``gt_xyxy`` is a constant (P, 4).
    Degenerate predicted sides are clamped to the geometry module's floor.
    """
    cx = ad.narrow(pred_cxcywh, 1, 0, 1)
    cy = ad.narrow(pred_cxcywh, 1, 1, 1)
    w = ad.maximum(ad.narrow(pred_cxcywh, 1, 2, 1), geometry.MIN_BOX_SIDE)
    h = ad.maximum(ad.narrow(pred_cxcywh, 1, 3, 1), geometry.MIN_BOX_SIDE)
    px1 = ad.sub(cx, ad.mul(w, 0.5))
    px2 = ad.add(cx, ad.mul(w, 0.5))
    py1 = ad.sub(cy, ad.mul(h, 0.5))
    py2 = ad.add(cy, ad.mul(h, 0.5))
    gx1, gy1, gx2, gy2 = (gt_xyxy[:, i:i + 1] for i in range(4))
    iw = ad.relu(ad.sub(ad.minimum(px2, gx2), ad.maximum(px1, gx1)))
    ih = ad.relu(ad.sub(ad.minimum(py2, gy2), ad.maximum(py1, gy1)))
    inter = ad.mul(iw, ih)
    area_p = ad.mul(w, h)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = ad.sub(ad.add(area_p, area_g), inter)
    hw = ad.sub(ad.maximum(px2, gx2), ad.minimum(px1, gx1))
    hh = ad.sub(ad.maximum(py2, gy2), ad.minimum(py1, gy1))
    hull = ad.mul(hw, hh)
    giou = ad.sub(ad.div(inter, union), ad.div(ad.sub(hull, union), hull))
    return ad.reshape(giou, (pred_cxcywh.shape[0],))


# -- plan construction --------------------------------------------------------

@dataclass
class RoutePlan:
    """Frozen per-(layer, route) assignment data for a batch."""

    pairs: list[list[tuple[int, int]]]      # per scene: (pred, gt) positives
    pos_mask: np.ndarray                    # (B, n, C) 1.0 at positive cells
    scene_weight: np.ndarray                # (B, 1, 1) = 1 / (B * max(1, npos))
    vfl_targets: np.ndarray                 # (B, n, C) iou^0.75 at positives
    flat_pair_idx: np.ndarray               # (P,) scene*n + pred
    pair_gt_cxcywh: np.ndarray              # (P, 4)
    pair_gt_xyxy: np.ndarray                # (P, 4)
    pair_weight: np.ndarray                 # (P, 1)
    n_positives: int


def _assign_scene(route_target: str, probs: np.ndarray, boxes: np.ndarray,
                  gt_boxes: np.ndarray, gt_labels: np.ndarray,
                  assigner: AssignerConfig):
    if len(gt_labels) == 0:
        return []
    if route_target == "o2o":
        cost = o2o_cost_matrix(probs, boxes, gt_labels, gt_boxes, assigner.cost_weights)
        return hungarian_match(cost).pairs()
    scores = probs[:, gt_labels]
    ious = geometry.iou_pairwise(
        geometry.cxcywh_to_xyxy(geometry.clamp_degenerate(boxes)),
        geometry.cxcywh_to_xyxy(gt_boxes))
    return o2m_assign(scores, ious, assigner.alpha, assigner.k, assigner.tau).pairs()


def build_route_plan(route_target: str, cls_logits: np.ndarray, boxes: np.ndarray,
                     gts, assigner: AssignerConfig) -> RoutePlan:
    """Assignments plus loss bookkeeping for one route at one layer.

    ``cls_logits`` and ``boxes`` are detached (B, n, C) / (B, n, 4) arrays;
    ``gts`` is a list of (gt_boxes, gt_labels) per scene. The IoU-score head
    plays no part here: assignments depend only on class logits and boxes.
    """
    batch, n, c = cls_logits.shape
    probs = 1.0 / (1.0 + np.exp(-cls_logits))
    pos_mask = np.zeros((batch, n, c))
    vfl_targets = np.zeros((batch, n, c))
    scene_weight = np.zeros((batch, 1, 1))
    pairs_per_scene = []
    flat_idx, gt_rows, pair_w = [], [], []
    for s in range(batch):
        gt_boxes, gt_labels = gts[s]
        pairs = _assign_scene(route_target, probs[s], boxes[s], gt_boxes, gt_labels, assigner)
        pairs_per_scene.append(pairs)
        npos = max(1, len(pairs))
        scene_weight[s] = 1.0 / (batch * npos)
        if pairs:
            pred_xyxy = geometry.cxcywh_to_xyxy(geometry.clamp_degenerate(boxes[s]))
            gt_xyxy = geometry.cxcywh_to_xyxy(gt_boxes)
            for (pi, gj) in pairs:
                lab = int(gt_labels[gj])
                pos_mask[s, pi, lab] = 1.0
                iou = geometry.iou_pairwise(pred_xyxy[pi], gt_xyxy[gj])[0, 0]
                vfl_targets[s, pi, lab] = iou ** 0.75
                flat_idx.append(s * n + pi)
                gt_rows.append(gt_boxes[gj])
                pair_w.append(1.0 / (batch * npos))
    gt_rows = np.asarray(gt_rows, dtype=np.float64).reshape(-1, 4)
    return RoutePlan(
        pairs=pairs_per_scene,
        pos_mask=pos_mask,
        scene_weight=scene_weight,
        vfl_targets=vfl_targets,
        flat_pair_idx=np.asarray(flat_idx, dtype=np.int64),
        pair_gt_cxcywh=gt_rows,
        pair_gt_xyxy=geometry.cxcywh_to_xyxy(gt_rows) if len(gt_rows) else gt_rows,
        pair_weight=np.asarray(pair_w, dtype=np.float64).reshape(-1, 1),
        n_positives=len(flat_idx),
    )


# -- loss terms ---------------------------------------------------------------

def _log_probs(logits: Tensor):
    """Stable (log p, log (1-p)) for p = sigmoid(logits)."""
    log_p = ad.neg(ad.softplus(ad.neg(logits)))
    log_1mp = ad.neg(ad.softplus(logits))
    return log_p, log_1mp


def focal_from_plan(cls_logits: Tensor, plan: RoutePlan) -> Tensor:
    """Sigmoid focal loss over every (prediction, class) cell, averaged over
    scenes with each scene normalized by its positive count (min 1).
    """
    p = ad.sigmoid(cls_logits)
    log_p, log_1mp = _log_probs(cls_logits)
    w_pos = Tensor(plan.pos_mask * plan.scene_weight)
    w_neg = Tensor((1.0 - plan.pos_mask) * plan.scene_weight)
    pos = ad.mul(ad.pow_(ad.sub(1.0, p), FOCAL_GAMMA), ad.neg(log_p))
    neg = ad.mul(ad.pow_(p, FOCAL_GAMMA), ad.neg(log_1mp))
    total = ad.add(ad.mul(ad.mul(w_pos, pos), FOCAL_ALPHA),
                   ad.mul(ad.mul(w_neg, neg), 1.0 - FOCAL_ALPHA))
    return total.sum()


def box_from_plan(boxes: Tensor, plan: RoutePlan, lambda_l1: float,
                  lambda_giou: float) -> Tensor:
    """L1 + GIoU loss over assigned pairs, same per-scene normalization."""
    if plan.n_positives == 0:
        return Tensor(0.0)
    batch, n, _ = boxes.shape
    flat = ad.reshape(boxes, (batch * n, 4))
    pred = ad.take_rows(flat, plan.flat_pair_idx)
    w = Tensor(plan.pair_weight)
    l1 = ad.abs_(ad.sub(pred, Tensor(plan.pair_gt_cxcywh))).sum(axis=1, keepdims=True)
    giou = ad.reshape(giou_pairs(pred, plan.pair_gt_xyxy), (plan.n_positives, 1))
    per_pair = ad.add(ad.mul(l1, lambda_l1), ad.mul(ad.sub(1.0, giou), lambda_giou))
    return ad.mul(per_pair, w).sum()


def vfl_from_plan(iou_logits: Tensor, plan: RoutePlan, vfl_alpha: float,
                  vfl_gamma: float) -> Tensor:
    """Varifocal-style loss on the class-aware IoU score.

    Positive (prediction, gt-class) cells regress q = IoU^0.75 with a
    q-weighted cross entropy; all other cells are down-weighted negatives.
    The targets are constants: no gradient flows into the realized IoUs.
    """
    p = ad.sigmoid(iou_logits)
    log_p, log_1mp = _log_probs(iou_logits)
    q = Tensor(plan.vfl_targets * plan.scene_weight)          # q, pre-scaled
    q_raw = plan.vfl_targets
    pos_ce = ad.add(ad.mul(Tensor(q_raw), ad.neg(log_p)),
                    ad.mul(Tensor(1.0 - q_raw), ad.neg(log_1mp)))
    pos = ad.mul(ad.mul(q, pos_ce), Tensor(plan.pos_mask))
    w_neg = Tensor((1.0 - plan.pos_mask) * plan.scene_weight)
    neg = ad.mul(ad.mul(w_neg, ad.pow_(p, vfl_gamma)), ad.neg(log_1mp))
    return ad.add(pos, ad.mul(neg, vfl_alpha)).sum()


def _single_scene_plan(target: str, assignment, labels, gt_boxes, cls_shape,
                       boxes=None, realized_ious=None) -> RoutePlan:
    """Adapt one explicit assignment to the batched plan layout."""
    n, c = cls_shape
    pairs = assignment.pairs()
    pos_mask = np.zeros((1, n, c))
    vfl_targets = np.zeros((1, n, c))
    flat_idx, gt_rows, pair_w = [], [], []
    npos = max(1, len(pairs))
    labels = np.asarray(labels, dtype=np.int64)
    for rank, (pi, gj) in enumerate(pairs):
        lab = int(labels[gj])
        pos_mask[0, pi, lab] = 1.0
        if realized_ious is not None:
            vfl_targets[0, pi, lab] = float(realized_ious[rank]) ** 0.75
        flat_idx.append(pi)
        if gt_boxes is not None:
            gt_rows.append(np.asarray(gt_boxes)[gj])
        pair_w.append(1.0 / npos)
    gt_rows = np.asarray(gt_rows, dtype=np.float64).reshape(-1, 4)
    return RoutePlan(
        pairs=[pairs],
        pos_mask=pos_mask,
        scene_weight=np.full((1, 1, 1), 1.0 / npos),
        vfl_targets=vfl_targets,
        flat_pair_idx=np.asarray(flat_idx, dtype=np.int64),
        pair_gt_cxcywh=gt_rows,
        pair_gt_xyxy=geometry.cxcywh_to_xyxy(gt_rows) if len(gt_rows) else gt_rows,
        pair_weight=np.asarray(pair_w, dtype=np.float64).reshape(-1, 1),
        n_positives=len(flat_idx),
    )


def focal_cls_loss(cls_logits, assignment, labels) -> Tensor:
    """Single-scene focal classification loss for an explicit assignment."""
    logits = ad.as_tensor(cls_logits)
    plan = _single_scene_plan("any", assignment, labels, None, logits.shape)
    return focal_from_plan(ad.reshape(logits, (1,) + logits.shape), plan)


def box_loss(pred_boxes, assignment, gt_boxes, lambda_l1: float = 1.0,
             lambda_giou: float = 1.0) -> Tensor:
    """Single-scene box regression loss for an explicit assignment."""
    boxes = ad.as_tensor(pred_boxes)
    n = boxes.shape[0]
    labels = np.zeros(np.asarray(gt_boxes).shape[0], dtype=np.int64)
    plan = _single_scene_plan("any", assignment, labels, gt_boxes, (n, 1))
    return box_from_plan(ad.reshape(boxes, (1, n, 4)), plan, lambda_l1, lambda_giou)


def vfl_iou_loss(iou_logits, assignment, labels, realized_ious,
                 vfl_alpha: float = 0.75, vfl_gamma: float = 2.0) -> Tensor:
    """Single-scene IoU-score loss; ``realized_ious`` aligns with the
    assignment's (pred, gt) pairs and is treated as constant."""
    logits = ad.as_tensor(iou_logits)
    plan = _single_scene_plan("any", assignment, labels, None, logits.shape,
                              realized_ious=realized_ious)
    return vfl_from_plan(ad.reshape(logits, (1,) + logits.shape), plan,
                         vfl_alpha, vfl_gamma)


# -- full objective -----------------------------------------------------------

def build_plan(per_layer_outputs, gts, route_specs, assigner: AssignerConfig):
    """One RoutePlan per (layer, route), from detached predictions."""
    plan = {}
    for li, layer_outs in enumerate(per_layer_outputs):
        for spec in route_specs:
            out = layer_outs[spec.name]
            plan[(li, spec.name)] = build_route_plan(
                spec.target, out.cls_logits.data, out.boxes.data, gts, assigner)
    return plan


def multi_route_loss(per_layer_outputs, gts, route_specs, weights: LossWeights,
                     assigner: AssignerConfig, plan=None):
    """Deep-supervised total: sum over layers of the primary route's loss
    plus lambda_aux times each auxiliary route's loss.

    Returns (loss tensor, per-(layer, route) breakdown, plan). Passing a
    previously built plan freezes the assignments and VFL targets, which
    is what gradient checking needs.
    """
    weights.validate()
    if plan is None:
        plan = build_plan(per_layer_outputs, gts, route_specs, assigner)
    total = None
    breakdown = {}
    for li, layer_outs in enumerate(per_layer_outputs):
        for spec in route_specs:
            aux = spec.target != "o2o"
            if aux and weights.lambda_aux == 0.0:
                continue  # keep these params out of the graph entirely
            out = layer_outs[spec.name]
            rp = plan[(li, spec.name)]
            cls = focal_from_plan(out.cls_logits, rp)
            box = box_from_plan(out.boxes, rp, weights.lambda_l1, weights.lambda_giou)
            iou = vfl_from_plan(out.iou_logits, rp, weights.vfl_alpha, weights.vfl_gamma)
            route_total = ad.add(ad.add(ad.mul(cls, weights.lambda_cls), box), iou)
            if aux:
                route_total = ad.mul(route_total, weights.lambda_aux)
            breakdown[(li, spec.name)] = {
                "cls": cls.item(), "box": box.item(), "iou": iou.item(),
                "total": route_total.item(), "positives": rp.n_positives,
            }
            total = route_total if total is None else ad.add(total, route_total)
    if total is None:
        raise ValueError("no routes contributed to the loss")
    return total, breakdown, plan
