import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fixtures_family import SIMILARITY_MAPS, breakdown_areas, check_match_and_ap, multi_class_family, single_class_family
from oracles import raster_iou
from robustdet.core import ContractError, DetectionSet, GroundTruthSet
from robustdet.metrics import (STAGES, ap50, average_precision, coco_eval, error_breakdown, iou, match_detections,
                               pr_curve)
from robustdet._accel import HAVE_NUMBA
from robustdet.metrics import kernels


@st.composite
def lattice_box(draw, scale=2, hi=40):
    x0 = draw(st.integers(0, hi - 1))
    y0 = draw(st.integers(0, hi - 1))
    x1 = draw(st.integers(x0 + 1, hi))
    y1 = draw(st.integers(y0 + 1, hi))
    return tuple(v / scale for v in (x0, y0, x1, y1))


@settings(max_examples=300, deadline=None)
@given(lattice_box(), lattice_box())
def test_iou_matches_raster_oracle(a, b):
    assert iou(a, b) == pytest.approx(raster_iou(a, b, scale=2), abs=1e-12)
    assert iou(a, b) == iou(b, a)


def test_iou_edge_cases():
    assert iou([0, 0, 2, 2], [0, 0, 2, 2]) == 1.0
    assert iou([0, 0, 2, 2], [2, 0, 4, 2]) == 0.0  # touching edges do not overlap
    with pytest.raises(ContractError):
        iou([0, 0, 0, 2], [0, 0, 1, 1])


def test_match_and_ap_on_fixture_family():
    worst = max(check_match_and_ap(*fx) for fx in single_class_family(ordered=False))
    assert worst <= 1e-9


def test_breakdown_monotone_on_fixture_family():
    for fx in multi_class_family(ordered=False):
        for sim in SIMILARITY_MAPS:
            areas = breakdown_areas(*fx, sim)
            assert all(b >= a - 1e-12 for a, b in zip(areas, areas[1:])), (fx, areas)
            assert areas[-1] == 1.0


def test_hand_computed_ap():
    gts = GroundTruthSet([[0, 0, 10, 10], [20, 0, 30, 10], [40, 0, 50, 10]], [0, 0, 0])
    dets = DetectionSet([[0, 0, 10, 10], [60, 60, 64, 64], [20, 0, 30, 10]], [0, 0, 0], [0.9, 0.8, 0.7])
    m = match_detections(dets, gts, 0.5)
    assert m.tp.tolist() == [True, False, True]
    rec, prec = pr_curve(m)
    assert np.allclose(rec, [1 / 3, 1 / 3, 2 / 3]) and np.allclose(prec, [1, 0.5, 2 / 3])
    # 34 recall points at precision 1 and 33 at 2/3
    assert average_precision(m) == pytest.approx(56 / 101, abs=1e-12)
    assert average_precision(m, method="11") == pytest.approx(6 / 11, abs=1e-12)


def test_ap_undefined_and_zero():
    empty_gt = GroundTruthSet(np.zeros((0, 4)), [])
    assert average_precision(match_detections(DetectionSet.empty(), empty_gt, 0.5)) is None
    one = DetectionSet([[0, 0, 1, 1]], [0], [0.5])
    assert average_precision(match_detections(one, empty_gt, 0.5)) == 0.0
    gt = GroundTruthSet([[0, 0, 1, 1]], [0])
    assert average_precision(match_detections(DetectionSet.empty(), gt, 0.5)) == 0.0


def test_greedy_prefers_highest_iou_then_lowest_index():
    gts = GroundTruthSet([[0, 0, 10, 10], [0, 0, 10, 10], [0, 0, 10, 9]], [0, 0, 0])
    dets = DetectionSet([[0, 0, 10, 10], [0, 0, 10, 10]], [0, 0], [0.5, 0.9])
    m = match_detections(dets, gts, 0.5)
    assert m.order.tolist() == [1, 0]
    assert m.matched_gt.tolist() == [0, 1]


def _random_boxes(rng, n):
    xy = rng.uniform(0, 50, (n, 2))
    wh = rng.uniform(1, 20, (n, 2))
    return np.concatenate([xy, xy + wh], 1)


@pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")
def test_numba_numpy_kernel_parity(rng):
    for _ in range(30):
        a, b = _random_boxes(rng, rng.integers(0, 12)), _random_boxes(rng, rng.integers(0, 12))
        i_nb, i_np = kernels.iou_matrix_nb(a, b), kernels.iou_matrix_np(a, b)
        assert np.array_equal(i_nb, i_np)
        for tau in (0.1, 0.5, 0.75):
            assert np.array_equal(kernels.greedy_match_nb(i_nb, tau), kernels.greedy_match_np(i_nb, tau))
        order = np.argsort(-rng.uniform(size=len(a)), kind="stable")
        assert np.array_equal(kernels.nms_nb(a, order, 0.5), kernels.nms_np(a, order, 0.5))
        rec = np.sort(rng.uniform(size=8))
        prec = rng.uniform(size=8)
        pts = np.linspace(0, 1, 101)
        assert np.array_equal(kernels.interpolated_precision_nb(rec, prec, pts),
                              kernels.interpolated_precision_np(rec, prec, pts))


def test_backend_flag_selects_numpy_and_agrees():
    code = ("import json, numpy as np\n"
            "from robustdet.metrics import coco_eval, BACKEND\n"
            "from robustdet.core import DetectionSet, GroundTruthSet\n"
            "rng = np.random.default_rng(0)\n"
            "pairs = []\n"
            "for _ in range(20):\n"
            "    xy = rng.uniform(0, 50, (5, 2)); g = np.concatenate([xy, xy + rng.uniform(2, 30, (5, 2))], 1)\n"
            "    d = g + rng.normal(0, 2, g.shape); d[:, 2:] = np.maximum(d[:, 2:], d[:, :2] + 1)\n"
            "    pairs.append((DetectionSet(d, rng.integers(0, 3, 5), rng.uniform(size=5)),"
            " GroundTruthSet(g, rng.integers(0, 3, 5))))\n"
            "print(json.dumps([BACKEND, coco_eval(pairs, 3).to_dict()]))\n")
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, ROBUSTDET_DISABLE_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        out[flag] = json.loads(res.stdout)
    assert out["1"][0] == "numpy"
    assert out["0"][1] == out["1"][1]


def _pairs(rng, n_images=8, num_classes=3):
    pairs = []
    for _ in range(n_images):
        g = _random_boxes(rng, 4)
        d = np.concatenate([g + rng.normal(0, 1.5, g.shape), _random_boxes(rng, 3)])
        d[:, 2:] = np.maximum(d[:, 2:], d[:, :2] + 0.5)
        pairs.append((DetectionSet(d, rng.integers(0, num_classes, 7), rng.uniform(0.01, 1, 7)),
                      GroundTruthSet(g, rng.integers(0, num_classes, 4))))
    return pairs


def test_coco_eval_perfect_and_empty():
    gts = [GroundTruthSet([[0, 0, 10, 10], [20, 20, 60, 60], [0, 30, 100, 130]], [0, 1, 2]) for _ in range(3)]
    perfect = [(DetectionSet(g.boxes, g.labels, [0.9, 0.8, 0.7]), g) for g in gts]
    r = coco_eval(perfect, 3)
    assert r.AP == r.AP50 == r.AP75 == 100.0
    assert r.AP_S == r.AP_M == r.AP_L == 100.0
    r0 = coco_eval([(DetectionSet.empty(), g) for g in gts], 3)
    assert r0.AP == 0.0 and r0.AP50 == 0.0


def test_coco_eval_area_bands():
    g = GroundTruthSet([[0, 0, 10, 10]], [0])  # area 100: small under COCO bands
    r = coco_eval([(DetectionSet(g.boxes, [0], [0.9]), g)], 1)
    assert r.AP_S == 100.0 and r.AP_M is None and r.AP_L is None
    r2 = coco_eval([(DetectionSet(g.boxes, [0], [0.9]), g)], 1, area_bands=(50.0, 80.0))
    assert r2.AP_L == 100.0 and r2.AP_S is None


def test_coco_eval_permutation_invariant(rng):
    pairs = _pairs(rng)
    base = coco_eval(pairs, 3).to_dict()
    perm = rng.permutation(len(pairs))
    shuffled = []
    for i in perm:
        d, g = pairs[i]
        p = rng.permutation(len(d))
        shuffled.append((DetectionSet(d.boxes[p], d.labels[p], d.scores[p]), g))
    again = coco_eval(shuffled, 3).to_dict()
    for k in ("AP", "AP50", "AP75", "AP_S", "AP_M", "AP_L"):
        assert again[k] == pytest.approx(base[k], abs=1e-9)


def test_ap50_agrees_with_coco_ap50(rng):
    pairs = _pairs(rng, 12)
    assert ap50(pairs, 3) == pytest.approx(coco_eval(pairs, 3).AP50, abs=1e-9)


def test_breakdown_hand_example():
    # gt A (class 0) and gt B (class 1); det 1 of class 0 sits on B, det 2 is exact on A
    gts = GroundTruthSet([[0, 0, 10, 10], [30, 30, 40, 40]], [0, 1])
    dets = DetectionSet([[30, 30, 40, 40], [0, 0, 10, 10], [30, 30, 40, 40]], [0, 0, 1], [0.9, 0.8, 0.95])
    same = error_breakdown([(dets, gts)], {0: "x", 1: "x"})
    assert [round(a, 6) for a in same.areas] == [0.75, 0.75, 0.75, 1.0, 1.0, 1.0, 1.0]
    diff = error_breakdown([(dets, gts)], {0: "x", 1: "y"})
    assert [round(a, 6) for a in diff.areas] == [0.75, 0.75, 0.75, 0.75, 1.0, 1.0, 1.0]
    assert diff.stages == list(STAGES)
    assert sum(diff.increments) == pytest.approx(1.0)


def test_breakdown_requires_similarity_for_every_class():
    gts = GroundTruthSet([[0, 0, 10, 10]], [1])
    with pytest.raises(ContractError, match="similarity_map"):
        error_breakdown([(DetectionSet.empty(), gts)], {0: "x"})
