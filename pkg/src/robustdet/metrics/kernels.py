"""Hot loops of the evaluation code.

Every kernel exists twice: a ``*_nb`` loop version compiled with numba and a
``*_np`` vectorized numpy version. The public names are bound to one of them
at import time according to :data:`robustdet._accel.USE_NUMBA`. Both versions
perform the same float64 operations in the same order, so they agree bit for
bit on IoU and matching; AP reductions happen outside the kernels.
"""

from __future__ import annotations

import numpy as np

from .._accel import USE_NUMBA, optional_njit


# --------------------------------------------------------------------------- IoU

@optional_njit(cache=True)
def iou_matrix_nb(a, b):
    n, m = a.shape[0], b.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            out[i, j] = inter / (area_a + area_b - inter)
    return out


def iou_matrix_np(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    overlap = (iw > 0.0) & (ih > 0.0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(overlap, inter / union, 0.0)


# ------------------------------------------------------------------ greedy match

@optional_njit(cache=True)
def greedy_match_nb(ious, tau):
    n, m = ious.shape
    taken = np.zeros(m, dtype=np.bool_)
    match = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        best = -1
        best_iou = tau
        for j in range(m):
            if taken[j]:
                continue
            v = ious[i, j]
            # strict '>' keeps the lower gt index on ties
            if v >= best_iou and (best < 0 or v > ious[i, best]):
                best = j
                best_iou = v
        if best >= 0:
            taken[best] = True
            match[i] = best
    return match


def greedy_match_np(ious, tau):
    ious = np.asarray(ious, dtype=np.float64)
    n, m = ious.shape
    match = np.full(n, -1, dtype=np.int64)
    if m == 0:
        return match
    avail = ious.copy()
    avail[avail < tau] = -1.0
    for i in range(n):
        j = int(np.argmax(avail[i]))  # argmax returns the first maximum
        if avail[i, j] >= tau:
            match[i] = j
            avail[:, j] = -1.0
    return match


# ----------------------------------------------------------- interpolated PR/AP

@optional_njit(cache=True)
def interpolated_precision_nb(recall, precision, thresholds):
    n = recall.shape[0]
    env = precision.copy()
    for k in range(n - 2, -1, -1):
        if env[k + 1] > env[k]:
            env[k] = env[k + 1]
    out = np.zeros(thresholds.shape[0])
    k = 0
    for t in range(thresholds.shape[0]):
        while k < n and recall[k] < thresholds[t]:
            k += 1
        if k < n:
            out[t] = env[k]
    return out


def interpolated_precision_np(recall, precision, thresholds):
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    out = np.zeros(len(thresholds))
    if len(recall) == 0:
        return out
    env = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, thresholds, side="left")
    ok = idx < len(recall)
    out[ok] = env[idx[ok]]
    return out


# ----------------------------------------------------------------------- NMS

@optional_njit(cache=True)
def nms_nb(boxes, order, thr):
    n = order.shape[0]
    suppressed = np.zeros(n, dtype=np.bool_)
    keep = np.empty(n, dtype=np.int64)
    count = 0
    for a in range(n):
        if suppressed[a]:
            continue
        i = order[a]
        keep[count] = i
        count += 1
        area_i = (boxes[i, 2] - boxes[i, 0]) * (boxes[i, 3] - boxes[i, 1])
        for b in range(a + 1, n):
            if suppressed[b]:
                continue
            j = order[b]
            iw = min(boxes[i, 2], boxes[j, 2]) - max(boxes[i, 0], boxes[j, 0])
            ih = min(boxes[i, 3], boxes[j, 3]) - max(boxes[i, 1], boxes[j, 1])
            if iw <= 0.0 or ih <= 0.0:
                continue
            inter = iw * ih
            area_j = (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1])
            if inter / (area_i + area_j - inter) > thr:
                suppressed[b] = True
    return keep[:count]


def nms_np(boxes, order, thr):
    boxes = np.asarray(boxes, dtype=np.float64)
    order = np.asarray(order, dtype=np.int64)
    ious = iou_matrix_np(boxes[order], boxes[order])
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for a in range(len(order)):
        if not alive[a]:
            continue
        keep.append(order[a])
        alive[a + 1:] &= ~(ious[a, a + 1:] > thr)
    return np.asarray(keep, dtype=np.int64)


if USE_NUMBA:
    iou_matrix = iou_matrix_nb
    greedy_match = greedy_match_nb
    interpolated_precision = interpolated_precision_nb
    nms = nms_nb
else:
    iou_matrix = iou_matrix_np
    greedy_match = greedy_match_np
    interpolated_precision = interpolated_precision_np
    nms = nms_np

BACKEND = "numba" if USE_NUMBA else "numpy"
