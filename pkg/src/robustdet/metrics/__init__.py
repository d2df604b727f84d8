from .breakdown import STAGES, ErrorBreakdown, error_breakdown
from .evaluation import (COCO_AREA_BANDS, IOU_THRESHOLDS, EvalReport, MatchResult, ap50, average_precision,
                         coco_eval, iou, match_detections, pr_curve)
from .kernels import BACKEND

__all__ = [
    "BACKEND", "COCO_AREA_BANDS", "IOU_THRESHOLDS", "STAGES", "ErrorBreakdown", "EvalReport",
    "MatchResult", "ap50", "average_precision", "coco_eval", "error_breakdown", "iou",
    "match_detections", "pr_curve",
]
