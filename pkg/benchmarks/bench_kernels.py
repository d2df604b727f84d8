"""Numba vs numpy timings for the evaluation kernels, plus an end-to-end coco_eval run per backend.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np

from robustdet._accel import HAVE_NUMBA
from robustdet.metrics import kernels


def random_boxes(rng, n, size=64.0):
    xy = rng.uniform(0, size * 0.8, size=(n, 2))
    wh = rng.uniform(2, size * 0.4, size=(n, 2))
    return np.concatenate([xy, xy + wh], axis=1)


def best_of(fn, repeat):
    fn()  # warm-up (jit compile for numba)
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def kernel_cases(rng):
    cases = []
    for n, m in [(20, 5), (200, 50), (1000, 200)]:
        a, b = random_boxes(rng, n), random_boxes(rng, m)
        ious = kernels.iou_matrix_np(a, b)
        cases.append((f"iou_matrix {n}x{m}", lambda a=a, b=b: kernels.iou_matrix_nb(a, b),
                      lambda a=a, b=b: kernels.iou_matrix_np(a, b)))
        cases.append((f"greedy_match {n}x{m}", lambda x=ious: kernels.greedy_match_nb(x, 0.5),
                      lambda x=ious: kernels.greedy_match_np(x, 0.5)))
    for n in (100, 1000):
        boxes = random_boxes(rng, n)
        order = np.arange(n)
        cases.append((f"nms {n}", lambda b=boxes, o=order: kernels.nms_nb(b, o, 0.6),
                      lambda b=boxes, o=order: kernels.nms_np(b, o, 0.6)))
    rec = np.sort(rng.uniform(0, 1, 5000))
    prec = rng.uniform(0, 1, 5000)
    thr = np.linspace(0, 1, 101)
    cases.append(("interpolated_precision 5000", lambda: kernels.interpolated_precision_nb(rec, prec, thr),
                  lambda: kernels.interpolated_precision_np(rec, prec, thr)))
    return cases


END_TO_END = """
import time, numpy as np
from robustdet.core import DetectionSet, GroundTruthSet
from robustdet.metrics import coco_eval, BACKEND
rng = np.random.default_rng(0)
pairs = []
for _ in range(200):
    k = int(rng.integers(1, 7)); n = int(rng.integers(5, 40))
    g = rng.uniform(0, 40, (k, 2)); gw = rng.uniform(4, 24, (k, 2))
    d = rng.uniform(0, 40, (n, 2)); dw = rng.uniform(4, 24, (n, 2))
    pairs.append((DetectionSet(np.hstack([d, d + dw]), rng.integers(0, 3, n), rng.uniform(0, 1, n)),
                  GroundTruthSet(np.hstack([g, g + gw]), rng.integers(0, 3, k))))
coco_eval(pairs[:5], 3)
t = time.perf_counter(); rep = coco_eval(pairs, 3); dt = time.perf_counter() - t
print(BACKEND, dt, rep.AP)
"""


def end_to_end(disable_numba: bool):
    env = dict(os.environ, ROBUSTDET_DISABLE_NUMBA="1" if disable_numba else "0")
    out = subprocess.run([sys.executable, "-c", END_TO_END], env=env, capture_output=True, text=True, check=True)
    backend, dt, ap = out.stdout.split()
    return backend, float(dt), float(ap)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args()
    if not HAVE_NUMBA:
        print("numba is not installed; both columns run the numpy path")
    rng = np.random.default_rng(0)
    rows = []
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, f_nb, f_np in kernel_cases(rng):
        t_nb, t_np = best_of(f_nb, args.repeat), best_of(f_np, args.repeat)
        rows.append({"kernel": name, "numba_s": t_nb, "numpy_s": t_np})
        print(f"{name:32s} {1e3 * t_nb:10.3f} {1e3 * t_np:10.3f} {t_np / t_nb:8.1f}x")
    e2e = {}
    for flag in (False, True):
        backend, dt, apv = end_to_end(flag)
        e2e[backend] = {"seconds": dt, "AP": apv}
        print(f"coco_eval 200 images [{backend}]: {dt:.3f} s  AP={apv:.6f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "coco_eval": e2e}, fh, indent=2)


if __name__ == "__main__":
    main()
