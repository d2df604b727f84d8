"""Exhaustive small detection fixtures: every draw of up to 5 detections from a
candidate pool against up to 3 ground-truth boxes.

``ordered=True`` enumerates ordered draws (so every input order is seen by the
tie rules); ``ordered=False`` enumerates multisets, a quicker subset. The pool
is built so that IoU values straddle the 0.1 / 0.5 / 0.75 thresholds and one
detection overlaps two gts.
"""

import itertools

GT_POOL = [(0, 0, 10, 10), (8, 0, 18, 10), (0, 20, 10, 30)]
GT_LABELS = [0, 1, 0]
DET_POOL = [
    (0, 0, 10, 10),    # exact on gt 0
    (0, 0, 10, 8),     # IoU 0.8 with gt 0
    (2, 0, 12, 10),    # 0.667 with gt 0, 0.25 with gt 1
    (5, 0, 15, 10),    # 0.333 with gt 0, 0.538 with gt 1
    (0, 20, 10, 26),   # 0.6 with gt 2
    (30, 30, 40, 40),  # background
]
SCORE_PATTERNS = [(0.9, 0.8, 0.7, 0.6, 0.5), (0.5, 0.9, 0.5, 0.9, 0.5)]
LABEL_PATTERNS = [(0, 0, 1, 1, 0), (1, 0, 0, 1, 1)]
SIMILARITY_MAPS = [{0: "a", 1: "a"}, {0: "a", 1: "b"}]
MAX_DETS, MAX_GTS = 5, 3


def _draws(nd, ordered):
    if ordered:
        return itertools.product(range(len(DET_POOL)), repeat=nd)
    return itertools.combinations_with_replacement(range(len(DET_POOL)), nd)


def single_class_family(ordered=False):
    """Yields (det_boxes, scores, gt_boxes) with every label equal to 0."""
    for ng in range(MAX_GTS + 1):
        gts = GT_POOL[:ng]
        for nd in range(MAX_DETS + 1):
            for combo in _draws(nd, ordered):
                for sp in SCORE_PATTERNS:
                    yield [DET_POOL[i] for i in combo], list(sp[:nd]), gts


def multi_class_family(ordered=False):
    """Yields (det_boxes, det_labels, scores, gt_boxes, gt_labels) with at least one gt."""
    for ng in range(1, MAX_GTS + 1):
        gts, gl = GT_POOL[:ng], GT_LABELS[:ng]
        for nd in range(MAX_DETS + 1):
            for combo in _draws(nd, ordered):
                for lp in LABEL_PATTERNS:
                    yield ([DET_POOL[i] for i in combo], list(lp[:nd]), list(SCORE_PATTERNS[0][:nd]), gts, gl)


def check_match_and_ap(det_boxes, scores, gt_boxes, taus=(0.1, 0.5, 0.75)):
    """Largest deviation between package and oracle for one fixture (0.0 = identical).

    A matching disagreement is reported as ``inf``.
    """
    import numpy as np

    from oracles import brute_ap, brute_match
    from robustdet.core import DetectionSet, GroundTruthSet
    from robustdet.metrics import average_precision, match_detections

    d = DetectionSet(np.asarray(det_boxes, float).reshape(-1, 4), [0] * len(scores), scores)
    g = GroundTruthSet(np.asarray(gt_boxes, float).reshape(-1, 4), [0] * len(gt_boxes))
    worst = 0.0
    for tau in taus:
        m = match_detections(d, g, tau)
        bm = brute_match(det_boxes, scores, gt_boxes, tau)
        if [int(i) for i in m.order] != [i for i, _ in bm] or m.matched_gt.tolist() != [j for _, j in bm]:
            return float("inf")
        tp = [False] * len(scores)
        for i, j in bm:
            tp[i] = j >= 0
        a, b = average_precision(m), brute_ap(tp, scores, len(gt_boxes))
        if (a is None) != (b is None):
            return float("inf")
        if a is not None:
            worst = max(worst, abs(a - b))
    return worst


def breakdown_areas(det_boxes, det_labels, scores, gt_boxes, gt_labels, similarity):
    import numpy as np

    from robustdet.core import DetectionSet, GroundTruthSet
    from robustdet.metrics import error_breakdown

    d = DetectionSet(np.asarray(det_boxes, float).reshape(-1, 4), det_labels, scores)
    g = GroundTruthSet(np.asarray(gt_boxes, float).reshape(-1, 4), gt_labels)
    return error_breakdown([(d, g)], similarity, num_classes=2).areas
