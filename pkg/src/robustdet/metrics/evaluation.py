"""IoU, greedy matching, interpolated AP and COCO-style evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..core import ContractError, DetectionSet, GroundTruthSet
from . import kernels

IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS_101 = np.linspace(0.0, 1.0, 101)
RECALL_POINTS_11 = np.linspace(0.0, 1.0, 11)
# Left-closed bands on gt area: small < 32^2 <= medium < 96^2 <= large.
COCO_AREA_BANDS = (32.0 ** 2, 96.0 ** 2)


def iou(a: Sequence[float], b: Sequence[float]) -> float:
    """Intersection over union of two corner-format boxes."""
    boxes = np.asarray([a, b], dtype=np.float64)
    if boxes.shape != (2, 4):
        raise ContractError("iou expects two (xmin, ymin, xmax, ymax) boxes")
    if np.any(boxes[:, 2] <= boxes[:, 0]) or np.any(boxes[:, 3] <= boxes[:, 1]):
        raise ContractError(f"degenerate box in iou({list(a)}, {list(b)})")
    return float(kernels.iou_matrix(boxes[:1], boxes[1:])[0, 0])


@dataclass(frozen=True, eq=False)
class MatchResult:
    """Outcome of matching one image's detections (one class) at threshold ``tau``.

    Arrays are in descending-score order; ``order`` maps back to the input
    detection indices. ``ignored`` marks detections excluded from the PR curve.
    """

    tau: float
    order: np.ndarray
    scores: np.ndarray
    tp: np.ndarray
    matched_gt: np.ndarray
    n_gt: int
    ignored: np.ndarray | None = None

    @property
    def fp(self) -> np.ndarray:
        return ~self.tp

    def kept(self) -> np.ndarray:
        return np.ones(len(self.tp), bool) if self.ignored is None else ~self.ignored


def score_order(scores: np.ndarray) -> np.ndarray:
    """Descending score order; ties keep input order."""
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def match_detections(dets: DetectionSet, gts: GroundTruthSet, tau: float) -> MatchResult:
    """Greedy matching of single-class detections to ground truth.

    In descending score order each detection claims the still-unmatched gt
    with the highest IoU >= ``tau`` (lowest gt index on ties).
    """
    order = score_order(dets.scores)
    ious = kernels.iou_matrix(dets.boxes[order], gts.boxes)
    match = kernels.greedy_match(ious, float(tau))
    return MatchResult(tau=float(tau), order=order, scores=dets.scores[order],
                       tp=match >= 0, matched_gt=match, n_gt=gts.K)


def pr_curve(results: Iterable[MatchResult] | MatchResult, n_gt: int | None = None
             ) -> tuple[np.ndarray, np.ndarray]:
    """Recall and precision after each detection of the merged, score-sorted list."""
    if isinstance(results, MatchResult):
        results = [results]
    results = list(results)
    if n_gt is None:
        n_gt = sum(r.n_gt for r in results)
    if not results:
        return np.zeros(0), np.zeros(0)
    scores = np.concatenate([r.scores[r.kept()] for r in results])
    tp = np.concatenate([r.tp[r.kept()] for r in results])
    order = score_order(scores)
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt if n_gt > 0 else np.zeros(len(tp))
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def average_precision(results: Iterable[MatchResult] | MatchResult, n_gt: int | None = None,
                      method: str = "101") -> float | None:
    """Area under the right-max interpolated PR curve.

    ``method`` is ``"101"`` (COCO recall sampling, default) or ``"11"``
    (VOC07 11-point rule). Returns ``None`` when the class has neither ground
    truth nor detections, and 0.0 when it has detections but no ground truth.
    """
    if isinstance(results, MatchResult):
        results = [results]
    results = list(results)
    if n_gt is None:
        n_gt = sum(r.n_gt for r in results)
    n_det = sum(int(r.kept().sum()) for r in results)
    if n_gt == 0:
        return None if n_det == 0 else 0.0
    if n_det == 0:
        return 0.0
    recall, precision = pr_curve(results, n_gt)
    return float(np.mean(interpolated_curve(recall, precision, method)))


def interpolated_curve(recall: np.ndarray, precision: np.ndarray, method: str = "101") -> np.ndarray:
    if method == "101":
        points = RECALL_POINTS_101
    elif method == "11":
        points = RECALL_POINTS_11
    else:
        raise ValueError(f"unknown AP interpolation {method!r}")
    return kernels.interpolated_precision(np.ascontiguousarray(recall, dtype=np.float64),
                                          np.ascontiguousarray(precision, dtype=np.float64), points)


@dataclass
class EvalReport:
    """COCO-style summary; AP values are percentages, ``None`` when undefined."""

    AP: float | None
    AP50: float | None
    AP75: float | None
    AP_S: float | None
    AP_M: float | None
    AP_L: float | None
    per_class: dict[str, dict[str, float | None]] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def _pct(v: float) -> float | None:
    return None if v is None or np.isnan(v) else float(100.0 * v)


def _band_index(areas: np.ndarray, bands: tuple[float, float]) -> np.ndarray:
    # 0 = small, 1 = medium, 2 = large; left-closed.
    return np.searchsorted(np.asarray(bands), areas, side="right")


def coco_eval(pairs: Sequence[tuple[DetectionSet, GroundTruthSet]], num_classes: int | None = None,
              area_bands: tuple[float, float] = COCO_AREA_BANDS, method: str = "101") -> EvalReport:
    """Evaluate per-image (detections, ground truth) pairs over the whole dataset.

    AP averages over IoU 0.50:0.05:0.95 and classes. For AP_S/M/L, gts outside
    the band are ignored, as are detections matched to them and unmatched
    detections whose own area falls outside the band.
    """
    pairs = list(pairs)
    if num_classes is None:
        labels = [d.labels for d, _ in pairs] + [g.labels for _, g in pairs]
        num_classes = int(max((l.max() for l in labels if len(l)), default=-1)) + 1
    n_tau = len(IOU_THRESHOLDS)
    # results[band][c][t] -> list of MatchResult; band 0 = all, 1..3 = S/M/L
    results = [[[[] for _ in range(n_tau)] for _ in range(num_classes)] for _ in range(4)]
    n_gt = np.zeros((4, num_classes), dtype=np.int64)
    for dets, gts in pairs:
        for c in range(num_classes):
            dm = dets.labels == c
            gm = gts.labels == c
            dboxes, dscores = dets.boxes[dm], dets.scores[dm]
            gboxes = gts.boxes[gm]
            if len(dboxes) == 0 and len(gboxes) == 0:
                continue
            order = score_order(dscores)
            dboxes, dscores = dboxes[order], dscores[order]
            g_band = _band_index((gboxes[:, 2] - gboxes[:, 0]) * (gboxes[:, 3] - gboxes[:, 1]), area_bands)
            d_band = _band_index((dboxes[:, 2] - dboxes[:, 0]) * (dboxes[:, 3] - dboxes[:, 1]), area_bands)
            n_gt[0, c] += len(gboxes)
            for b in range(3):
                n_gt[b + 1, c] += int(np.sum(g_band == b))
            ious = kernels.iou_matrix(dboxes, gboxes)
            for t, tau in enumerate(IOU_THRESHOLDS):
                match = kernels.greedy_match(ious, tau)
                tp = match >= 0
                base = dict(tau=tau, order=order, scores=dscores, matched_gt=match)
                results[0][c][t].append(MatchResult(tp=tp, n_gt=len(gboxes), **base))
                for b in range(3):
                    gt_out = np.where(tp, g_band[np.maximum(match, 0)] != b, False) if len(gboxes) else tp
                    ignored = np.where(tp, gt_out, d_band != b)
                    results[b + 1][c][t].append(
                        MatchResult(tp=tp, n_gt=int(np.sum(g_band == b)), ignored=ignored, **base))
    ap = np.full((4, num_classes, n_tau), np.nan)
    for b in range(4):
        for c in range(num_classes):
            for t in range(n_tau):
                v = average_precision(results[b][c][t], int(n_gt[b, c]), method)
                if v is not None:
                    ap[b, c, t] = v

    def mean(a):
        a = a[~np.isnan(a)]
        return float(a.mean()) if a.size else np.nan

    t50, t75 = IOU_THRESHOLDS.index(0.5), IOU_THRESHOLDS.index(0.75)
    per_class = {str(c): {"AP": _pct(mean(ap[0, c])), "AP50": _pct(mean(ap[0, c, t50:t50 + 1]))}
                 for c in range(num_classes)}
    counts = {"images": len(pairs), "gt": int(n_gt[0].sum()),
              "detections": int(sum(len(d) for d, _ in pairs))}
    return EvalReport(AP=_pct(mean(ap[0])), AP50=_pct(mean(ap[0, :, t50])),
                      AP75=_pct(mean(ap[0, :, t75])), AP_S=_pct(mean(ap[1])),
                      AP_M=_pct(mean(ap[2])), AP_L=_pct(mean(ap[3])),
                      per_class=per_class, counts=counts)


def ap50(pairs: Sequence[tuple[DetectionSet, GroundTruthSet]], num_classes: int | None = None,
         method: str = "101") -> float:
    """PASCAL-style AP50 in percent: class mean of AP at IoU 0.5."""
    pairs = list(pairs)
    if num_classes is None:
        labels = [d.labels for d, _ in pairs] + [g.labels for _, g in pairs]
        num_classes = int(max((l.max() for l in labels if len(l)), default=-1)) + 1
    aps = []
    for c in range(num_classes):
        res, n = [], 0
        for dets, gts in pairs:
            dm, gm = dets.labels == c, gts.labels == c
            n += int(gm.sum())
            if dm.any() or gm.any():
                res.append(match_detections(
                    DetectionSet(dets.boxes[dm], dets.labels[dm], dets.scores[dm]),
                    GroundTruthSet(gts.boxes[gm], gts.labels[gm]), 0.5))
        v = average_precision(res, n, method)
        if v is not None:
            aps.append(v)
    return float(100.0 * np.mean(aps)) if aps else 0.0
