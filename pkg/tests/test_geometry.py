import numpy as np
import pytest

from multiroute.geometry import (
    BoxError,
    box_convert,
    clamp_degenerate,
    cxcywh_to_xyxy,
    giou_pairwise,
    iou_pairwise,
    nms,
    nms_per_class,
    xyxy_to_cxcywh,
)


def raster_iou(a, b, cells=64):
    # grid-count oracle: boxes with coordinates on the 1/cells lattice are exact
    lo = min(a[0], a[1], b[0], b[1], 0.0)
    hi = max(a[2], a[3], b[2], b[3], 1.0)
    n = int(round((hi - lo) * cells))
    xs = lo + (np.arange(n) + 0.5) / cells
    gx, gy = np.meshgrid(xs, xs, indexing="ij")

    def inside(box):
        return (gx >= box[0]) & (gx < box[2]) & (gy >= box[1]) & (gy < box[3])

    ia, ib = inside(a), inside(b)
    inter = np.count_nonzero(ia & ib)
    union = np.count_nonzero(ia | ib)
    return inter / union if union else 0.0


def naive_nms(boxes, scores, thresh):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        ok = True
        for j in kept:
            if iou_pairwise(boxes[i], boxes[j])[0, 0] > thresh:
                ok = False
                break
        if ok:
            kept.append(i)
    return kept


def random_lattice_boxes(rng, n, cells=64):
    boxes = np.empty((n, 4))
    for i in range(n):
        x1, x2 = sorted(rng.choice(cells + 1, size=2, replace=False))
        y1, y2 = sorted(rng.choice(cells + 1, size=2, replace=False))
        boxes[i] = (x1 / cells, y1 / cells, x2 / cells, y2 / cells)
    return boxes


def test_convert_full_image_box():
    out = cxcywh_to_xyxy([0.5, 0.5, 1.0, 1.0])
    assert np.allclose(out, [[0, 0, 1, 1]], atol=1e-15)


def test_convert_roundtrip():
    box = np.array([[0.0, 0.0, 2.0, 2.0]])
    back = cxcywh_to_xyxy(xyxy_to_cxcywh(box))
    assert np.all(np.abs(back - box) <= 1e-12)
    assert np.allclose(xyxy_to_cxcywh(box), [[1, 1, 2, 2]])


def test_convert_quarter_box():
    assert np.allclose(cxcywh_to_xyxy([0.25, 0.25, 0.5, 0.5]), [[0, 0, 0.5, 0.5]])


def test_convert_rejects_degenerate():
    with pytest.raises(BoxError):
        cxcywh_to_xyxy([0.5, 0.5, 0.0, 0.1])
    with pytest.raises(BoxError):
        xyxy_to_cxcywh([0.2, 0.2, 0.2, 0.4])
    with pytest.raises(ValueError):
        box_convert([0, 0, 1, 1], "xyxy", "polar")


def test_clamp_degenerate():
    out = clamp_degenerate([[0.5, 0.5, 1e-9, 0.2]])
    assert out[0, 2] == 1e-6 and out[0, 3] == 0.2


def test_iou_identity_and_disjoint():
    a = np.array([[0.1, 0.1, 0.4, 0.5]])
    assert iou_pairwise(a, a)[0, 0] == 1.0
    b = np.array([[0.6, 0.6, 0.9, 0.9]])
    assert iou_pairwise(a, b)[0, 0] == 0.0


def test_iou_one_seventh():
    a = np.array([[0.0, 0.0, 2.0, 2.0]])
    b = np.array([[1.0, 1.0, 3.0, 3.0]])
    got = iou_pairwise(a, b)[0, 0]
    assert abs(got - 1.0 / 7.0) <= 1e-12
    assert abs(got - raster_iou(a[0], b[0])) <= 1e-12


def test_iou_matches_raster_oracle():
    rng = np.random.default_rng(21)
    a = random_lattice_boxes(rng, 12)
    b = random_lattice_boxes(rng, 9)
    mat = iou_pairwise(a, b)
    assert mat.shape == (12, 9)
    assert np.all(mat >= 0) and np.all(mat <= 1)
    assert np.array_equal(mat.T, iou_pairwise(b, a))
    for i in range(12):
        for j in range(9):
            assert abs(mat[i, j] - raster_iou(a[i], b[j])) <= 1e-12


def test_giou_identity_and_hand_cases():
    a = np.array([[0.0, 0.0, 1.0, 1.0]])
    assert giou_pairwise(a, a)[0, 0] == 1.0
    far = np.array([[2.0, 2.0, 3.0, 3.0]])
    # hull 9, union 2, IoU 0 -> -(9-2)/9
    assert abs(giou_pairwise(a, far)[0, 0] + 7.0 / 9.0) <= 1e-12
    touching = np.array([[1.0, 0.0, 2.0, 1.0]])
    assert abs(giou_pairwise(a, touching)[0, 0]) <= 1e-12


def test_giou_never_exceeds_iou():
    rng = np.random.default_rng(22)
    a = random_lattice_boxes(rng, 20)
    b = random_lattice_boxes(rng, 20)
    assert np.all(giou_pairwise(a, b) <= iou_pairwise(a, b) + 1e-12)


def test_nms_exact_duplicate():
    boxes = np.array([[0.1, 0.1, 0.5, 0.5], [0.1, 0.1, 0.5, 0.5]])
    assert nms(boxes, [0.9, 0.8], 0.5) == [0]


def test_nms_disjoint_keeps_all():
    boxes = np.array([[0.0, 0.0, 0.2, 0.2], [0.3, 0.3, 0.5, 0.5], [0.6, 0.6, 0.8, 0.8]])
    assert sorted(nms(boxes, [0.1, 0.9, 0.5], 0.3)) == [0, 1, 2]


def test_nms_matches_bruteforce():
    rng = np.random.default_rng(23)
    for _ in range(50):
        boxes = random_lattice_boxes(rng, 8, cells=8)
        scores = rng.random(8)
        thresh = float(rng.random())
        assert nms(boxes, scores, thresh) == naive_nms(boxes, scores, thresh)


def test_nms_threshold_boundaries():
    rng = np.random.default_rng(24)
    boxes = random_lattice_boxes(rng, 10, cells=8)
    scores = rng.random(10)
    assert sorted(nms(boxes, scores, 1.0)) == list(range(10))
    kept = nms(boxes, scores, 0.0)
    ious = iou_pairwise(boxes[kept], boxes[kept])
    off_diag = ious[~np.eye(len(kept), dtype=bool)]
    assert np.all(off_diag <= 0.0 + 1e-12)


def test_nms_kept_pairwise_constraint():
    rng = np.random.default_rng(25)
    boxes = random_lattice_boxes(rng, 16)
    scores = rng.random(16)
    kept = nms(boxes, scores, 0.4)
    ious = iou_pairwise(boxes[kept], boxes[kept])
    off_diag = ious[~np.eye(len(kept), dtype=bool)]
    assert np.all(off_diag <= 0.4)
    # kept order is by descending score
    assert list(scores[kept]) == sorted(scores[kept], reverse=True)


def test_nms_length_mismatch():
    with pytest.raises(ValueError):
        nms(np.array([[0, 0, 1, 1.0]]), [0.5, 0.4], 0.5)


def test_class_aware_nms_separates_labels():
    boxes = np.array([[0.1, 0.1, 0.5, 0.5], [0.1, 0.1, 0.5, 0.5]])
    # same box, different labels: both survive class-aware suppression
    assert sorted(nms_per_class(boxes, [0.9, 0.8], [0, 1], 0.5)) == [0, 1]
    assert nms_per_class(boxes, [0.9, 0.8], [1, 1], 0.5) == [0]
