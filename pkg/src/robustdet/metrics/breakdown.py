"""Progressive error breakdown: PR curves under successively relaxed criteria."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..core import ContractError, DetectionSet, GroundTruthSet
from . import kernels
from .evaluation import RECALL_POINTS_101, MatchResult, average_precision, interpolated_curve, pr_curve, score_order

STAGES = ("C75", "C50", "Loc", "Sim", "Oth", "BG", "FN")
LOC_IOU = 0.1


@dataclass
class ErrorBreakdown:
    """Cumulative area per stage, the per-stage increments and the mean PR curves."""

    stages: list[str]
    areas: list[float]
    increments: list[float]
    curves: dict[str, list[float]] = field(default_factory=dict)
    recall: list[float] = field(default_factory=lambda: RECALL_POINTS_101.tolist())

    def area(self, stage: str) -> float:
        return self.areas[self.stages.index(stage)]

    def increment(self, stage: str) -> float:
        return self.increments[self.stages.index(stage)]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ErrorBreakdown":
        return cls(**d)


def _stage_flags(dboxes, gts: GroundTruthSet, c: int, supercat: Mapping[int, object]):
    """tp / ignored flags for each relaxation stage, for one image and class ``c``."""
    gm = gts.labels == c
    same = kernels.iou_matrix(dboxes, gts.boxes[gm])
    other_boxes = gts.boxes[~gm]
    other_labels = gts.labels[~gm]
    other = kernels.iou_matrix(dboxes, other_boxes)
    near_other = other >= LOC_IOU
    sim_mask = np.array([supercat[int(l)] == supercat[c] for l in other_labels], dtype=bool)
    near_sim = (near_other & sim_mask[None, :]).any(axis=1) if len(other_labels) else np.zeros(len(dboxes), bool)
    near_any = near_other.any(axis=1) if len(other_labels) else np.zeros(len(dboxes), bool)

    none = np.zeros(len(dboxes), dtype=bool)
    tp75 = kernels.greedy_match(same, 0.75) >= 0
    tp50 = kernels.greedy_match(same, 0.5) >= 0
    tp_loc = kernels.greedy_match(same, LOC_IOU) >= 0
    fp = ~tp_loc
    return {
        "C75": (tp75, none),
        "C50": (tp50, none),
        "Loc": (tp_loc, none),
        "Sim": (tp_loc, fp & near_sim),
        "Oth": (tp_loc, fp & near_any),
        "BG": (tp_loc, fp),
    }, int(gm.sum())


def error_breakdown(pairs: Sequence[tuple[DetectionSet, GroundTruthSet]],
                    similarity_map: Mapping[int, object] | None = None,
                    num_classes: int | None = None) -> ErrorBreakdown:
    """Attribute the PR-area shortfall to localization, confusion, background and misses.

    Stages, in order: C75 and C50 (plain matching at IoU 0.75 / 0.5), Loc
    (matching at IoU 0.1), Sim (false positives overlapping a gt of another
    class in the same supercategory are dropped), Oth (any other-class
    overlap dropped), BG (every false positive dropped) and FN (misses
    forgiven, area 1). Areas are class means of 101-point AP.
    """
    pairs = list(pairs)
    present = sorted({int(l) for d, g in pairs for l in np.concatenate([d.labels, g.labels])})
    if num_classes is None:
        num_classes = present[-1] + 1 if present else 0
    if similarity_map is None:
        similarity_map = {c: c for c in range(num_classes)}
    else:
        similarity_map = {int(k): v for k, v in similarity_map.items()}
        missing = [c for c in present if c not in similarity_map]
        if missing:
            raise ContractError(f"classes {missing} missing from similarity_map")

    per_class_area = {s: [] for s in STAGES[:-1]}
    per_class_curve = {s: [] for s in STAGES[:-1]}
    for c in range(num_classes):
        stage_results = {s: [] for s in STAGES[:-1]}
        n_gt = 0
        for dets, gts in pairs:
            dm = dets.labels == c
            order = score_order(dets.scores[dm])
            dboxes, dscores = dets.boxes[dm][order], dets.scores[dm][order]
            flags, k = _stage_flags(dboxes, gts, c, similarity_map)
            n_gt += k
            for s, (tp, ign) in flags.items():
                stage_results[s].append(MatchResult(tau=0.0, order=order, scores=dscores, tp=tp,
                                                    matched_gt=np.where(tp, 0, -1), n_gt=k, ignored=ign))
        if n_gt == 0:
            continue
        for s in STAGES[:-1]:
            per_class_area[s].append(average_precision(stage_results[s], n_gt))
            rec, prec = pr_curve(stage_results[s], n_gt)
            per_class_curve[s].append(interpolated_curve(rec, prec))

    if not per_class_area["C75"]:
        raise ContractError("error breakdown needs at least one ground-truth instance")
    areas, curves = [], {}
    for s in STAGES[:-1]:
        areas.append(float(np.mean(per_class_area[s])))
        curves[s] = np.mean(per_class_curve[s], axis=0).tolist()
    areas.append(1.0)
    curves["FN"] = np.ones(len(RECALL_POINTS_101)).tolist()
    increments = [areas[0]] + [areas[i] - areas[i - 1] for i in range(1, len(areas))]
    return ErrorBreakdown(stages=list(STAGES), areas=areas, increments=increments, curves=curves)
