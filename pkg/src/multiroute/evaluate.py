"""COCO-style average precision and per-route model evaluation.

AP follows the standard recipe: greedy matching of score-ranked detections
to unmatched ground truths per class and IoU threshold, a precision
envelope, 101-point interpolation, and averaging over the 0.50:0.05:0.95
thresholds. Primary-route detections are scored raw; one-to-many routes
are deduplicated with class-aware NMS first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry, losses
from .model import DetectionModel, Trace

COCO_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
DEFAULT_NMS_THRESH = 0.7


@dataclass
class Detection:
    box_xyxy: np.ndarray
    label: int
    score: float
    scene_id: int
    det_id: int  # stable within its scene; breaks score ties deterministically


def _ap_single(ranked_scene_ids, ranked_ious, gt_counts: dict[int, int],
               n_gt: int, thresh: float) -> float:
    """AP for one class at one IoU threshold.

    ``ranked_ious[r]`` holds detection r's IoU against every same-scene gt
    of this class (already score-ranked); matching is greedy by rank.
    """
    if n_gt == 0:
        return float("nan")
    if not ranked_scene_ids:
        return 0.0
    matched = {sid: np.zeros(cnt, dtype=bool) for sid, cnt in gt_counts.items()}
    tp = np.zeros(len(ranked_scene_ids))
    for rank, (sid, ious) in enumerate(zip(ranked_scene_ids, ranked_ious)):
        if ious is None or not len(ious):
            continue
        avail = np.where(matched[sid], -1.0, ious)
        j = int(np.argmax(avail))
        if avail[j] >= thresh:
            matched[sid][j] = True
            tp[rank] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (np.arange(len(tp)) + 1.0)
    # precision envelope, then 101-point interpolation
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean())


def compute_ap(detections: list[Detection], gts, iou_thresholds=COCO_THRESHOLDS) -> dict:
    """{AP, AP50, AP75} plus the per-class, per-threshold table.

    ``gts`` is a list indexed by scene id of (gt_boxes_xyxy, labels). The
    mean runs over classes with at least one ground truth; with no ground
    truths anywhere the metrics are absent (None), not zero.
    """
    classes = sorted({int(l) for _, labels in gts for l in labels})
    if not classes:
        return {"ap": None, "ap50": None, "ap75": None, "per_class": {}}
    by_class: dict[int, list[Detection]] = {c: [] for c in classes}
    for d in detections:
        if d.label in by_class:
            by_class[d.label].append(d)
    table = {}
    for c in classes:
        gt_by_scene = {}
        n_gt = 0
        for sid, (boxes, labels) in enumerate(gts):
            sel = np.asarray(labels) == c
            gt_by_scene[sid] = np.asarray(boxes).reshape(-1, 4)[sel]
            n_gt += int(sel.sum())
        dets = sorted(by_class[c], key=lambda d: (-d.score, d.scene_id, d.det_id))
        # IoUs against same-scene gts are threshold-independent: compute once
        ranked_ious = [geometry.iou_pairwise(d.box_xyxy, gt_by_scene[d.scene_id])[0]
                       if len(gt_by_scene.get(d.scene_id, ())) else None
                       for d in dets]
        ranked_sids = [d.scene_id for d in dets]
        gt_counts = {sid: len(b) for sid, b in gt_by_scene.items()}
        table[c] = [_ap_single(ranked_sids, ranked_ious, gt_counts, n_gt, t)
                    for t in iou_thresholds]
    per_thresh = np.array([table[c] for c in classes])  # (C, T)
    mean_per_thresh = per_thresh.mean(axis=0)
    thresholds = list(iou_thresholds)
    return {
        "ap": float(mean_per_thresh.mean()),
        "ap50": float(mean_per_thresh[thresholds.index(0.5)]) if 0.5 in thresholds else None,
        "ap75": float(mean_per_thresh[thresholds.index(0.75)]) if 0.75 in thresholds else None,
        "per_class": {c: [float(v) for v in table[c]] for c in classes},
    }


def detections_from_grid(scores: np.ndarray, boxes_cxcywh: np.ndarray, scene_id: int,
                         use_nms: bool, top_n: int,
                         nms_thresh: float = DEFAULT_NMS_THRESH) -> list[Detection]:
    """Turn one scene's (n, C) score grid into ranked detections."""
    n, c = scores.shape
    boxes_xyxy = geometry.cxcywh_to_xyxy(geometry.clamp_degenerate(boxes_cxcywh))
    flat_scores = scores.reshape(-1)
    labels = np.tile(np.arange(c), n)
    queries = np.repeat(np.arange(n), c)
    keep = np.arange(n * c)
    if use_nms:
        keep = np.array(geometry.nms_per_class(boxes_xyxy[queries], flat_scores,
                                               labels, nms_thresh), dtype=np.int64)
    order = keep[np.lexsort((keep, -flat_scores[keep]))][:top_n]
    return [Detection(box_xyxy=boxes_xyxy[queries[i]], label=int(labels[i]),
                      score=float(flat_scores[i]), scene_id=scene_id, det_id=int(i))
            for i in order]


def evaluate_routes(model: DetectionModel, scenes, requests, top_n: int | None = None,
                    phi: float = 0.0, nms_thresh: float = DEFAULT_NMS_THRESH,
                    eval_batch: int = 16, per_layer: bool = True) -> dict:
    """AP metrics for several routes sharing one forward pass per chunk.

    ``requests`` is a list of (route_name, use_nms) pairs; use_nms=None
    picks the route's natural mode (primary raw, one-to-many with NMS).
    """
    names = {s.name: s for s in model.cfg.route_specs}
    resolved = []
    for route, use_nms in requests:
        if route not in names:
            raise KeyError(f"route {route!r} not in model (have {list(names)})")
        if use_nms is None:
            use_nms = names[route].target == "o2m"
        resolved.append((route, bool(use_nms)))
    n, c = model.cfg.n_queries, model.cfg.n_classes
    if top_n is None:
        top_n = min(100, n * c)
    n_layers = model.cfg.n_dec_layers
    dets: dict[tuple, list[list[Detection]]] = {
        key: [[] for _ in range(n_layers)] for key in resolved}
    gts = []
    for start in range(0, len(scenes), eval_batch):
        chunk = scenes[start:start + eval_batch]
        images = np.stack([s.image for s in chunk])
        outs = model.forward_train(images)
        for li, layer_outs in enumerate(outs):
            if not per_layer and li != n_layers - 1:
                continue
            grids = {}
            for route, use_nms in resolved:
                if route not in grids:
                    out = layer_outs[route]
                    cls_prob = 1.0 / (1.0 + np.exp(-out.cls_logits.data))
                    iou_prob = 1.0 / (1.0 + np.exp(-out.iou_logits.data))
                    grids[route] = (losses.calibrate_score(cls_prob, iou_prob, phi),
                                    out.boxes.data)
                scores, boxes = grids[route]
                for b in range(len(chunk)):
                    dets[(route, use_nms)][li].extend(detections_from_grid(
                        scores[b], boxes[b], start + b, use_nms, top_n, nms_thresh))
        for scene in chunk:
            gts.append((geometry.cxcywh_to_xyxy(scene.boxes), scene.labels))
    results = {}
    for key in resolved:
        route, use_nms = key
        per_layer_metrics = [compute_ap(layer, gts) if layer else None
                             for layer in dets[key]]
        final = per_layer_metrics[-1]
        results[key] = {
            "route": route,
            "use_nms": use_nms,
            "ap": final["ap"], "ap50": final["ap50"], "ap75": final["ap75"],
            "per_layer_ap": [m["ap"] if m else None for m in per_layer_metrics],
        }
    return results


def evaluate_model(model: DetectionModel, scenes, route: str, use_nms: bool | None = None,
                   top_n: int | None = None, phi: float = 0.0,
                   nms_thresh: float = DEFAULT_NMS_THRESH, eval_batch: int = 16,
                   per_layer: bool = True) -> dict:
    """AP metrics for one route's detections over a scene list.

    The primary route defaults to raw (no NMS) scoring; one-to-many routes
    default to class-aware NMS, matching how each is meant to be read.
    """
    out = evaluate_routes(model, scenes, [(route, use_nms)], top_n=top_n, phi=phi,
                          nms_thresh=nms_thresh, eval_batch=eval_batch,
                          per_layer=per_layer)
    return next(iter(out.values()))


def metrics_csv_header(n_layers: int) -> list[str]:
    return (["run_id", "epoch", "route", "use_nms", "ap", "ap50", "ap75"]
            + [f"layer{i}_ap" for i in range(n_layers)])


def metrics_csv_row(run_id: str, epoch, metrics: dict) -> list[str]:
    def fmt(x):
        return "" if x is None else repr(float(x))

    return ([run_id, str(epoch), metrics["route"], str(int(metrics["use_nms"])),
             fmt(metrics["ap"]), fmt(metrics["ap50"]), fmt(metrics["ap75"])]
            + [fmt(v) for v in metrics["per_layer_ap"]])
