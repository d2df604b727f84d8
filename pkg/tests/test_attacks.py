import warnings
from fractions import Fraction

import numpy as np
import pytest

from robustdet.attacks import AttackError, AttackSpec, EmptyTargetWarning, attack_batch, pgd_arrays, pgd_attack
from robustdet.core import (PIXEL_ULP, DetectionSet, DetectorHandle, GroundTruthSet, PerInstanceLosses,
                            PixelImage)

GT = GroundTruthSet([[0, 0, 2, 2]], [0])


class LinearDetector(DetectorHandle):
    """Objective = <w, x> for every kind; the optimum of the l-inf problem is known in closed form."""

    def __init__(self, w, nan=False):
        self.w = np.asarray(w, dtype=np.float32)
        self.nan = nan

    def param_groups(self):
        return {"backbone": [], "head": []}

    def losses(self, x, gt):
        v = float(max((self.w * x.data).sum(), 0.0))
        return PerInstanceLosses([v] * gt.K, [0.0] * gt.K)

    def detect(self, x):
        return DetectionSet.empty()

    def input_gradient(self, objective, x, gt, weights=None):
        return np.full_like(self.w, np.nan) if self.nan else self.w.copy()


def closed_form(x, w, eps, alpha, steps):
    step_total = min(alpha * steps, eps)
    return np.clip(x + np.sign(w) * step_total, np.maximum(x - eps, 0), np.minimum(x + eps, 1))


@pytest.mark.parametrize("eps,frac,steps", [(8, Fraction(1, 4), 20), (4, Fraction(1, 4), 2), (2, Fraction(1), 1),
                                            (16, Fraction(1, 10), 3)])
def test_linear_closed_form(rng, eps, frac, steps):
    x = rng.uniform(0, 1, (3, 4, 4)).astype(np.float32)
    x[0, 0, :2] = [0.0, 1.0]         # saturated pixels must stay in range
    w = rng.normal(size=x.shape).astype(np.float32)
    w[1, 1, 1] = 0.0                  # sign(0) = 0: pixel never moves
    spec = AttackSpec.make("cls", eps, frac, steps)
    adv = pgd_attack(LinearDetector(w), PixelImage(x), GT, spec).data
    expect = closed_form(x.astype(np.float64), w, eps / 255, float(frac) * eps / 255, steps)
    assert np.allclose(adv, expect, atol=2 * PIXEL_ULP)
    assert adv[1, 1, 1] == x[1, 1, 1]


def test_linear_monotone_in_eps(rng):
    x = rng.uniform(0, 1, (3, 6, 6)).astype(np.float32)
    w = rng.normal(size=x.shape).astype(np.float32)
    det = LinearDetector(w)
    vals = [float((w * pgd_attack(det, PixelImage(x), GT, AttackSpec.make("cls", e)).data).sum())
            for e in (0, 1, 2, 4, 8, 16)]
    assert all(b >= a for a, b in zip(vals, vals[1:]))


def test_empty_target_returns_input():
    x = PixelImage(np.full((3, 4, 4), 0.5), "img-a")
    with pytest.warns(EmptyTargetWarning):
        out = pgd_attack(LinearDetector(np.ones((3, 4, 4))), x, GroundTruthSet(np.zeros((0, 4)), []),
                         AttackSpec.make())
    assert out is x


def test_diverged_gradient_names_image():
    items = [(PixelImage(np.full((3, 4, 4), 0.5), "bad-7"), GT)]
    with pytest.raises(AttackError, match="bad-7"):
        attack_batch(LinearDetector(np.ones((3, 4, 4)), nan=True), items, AttackSpec.make())


def test_random_start_seeded_and_bounded(rng):
    x = rng.uniform(0, 1, (2, 3, 4, 4)).astype(np.float32)
    det = LinearDetector(np.zeros((3, 4, 4)))  # zero gradient: output is the random start itself
    spec = AttackSpec.make("cls", 8, random_start=True, seed=5)
    a = pgd_arrays(det, x, [GT, GT], spec)
    b = pgd_arrays(det, x, [GT, GT], spec)
    assert np.array_equal(a, b)
    assert np.abs(a - x).max() <= 8 / 255 + PIXEL_ULP
    assert np.abs(a - x).max() > 0


def test_toy_detector_respects_budget_and_raises_loss(tiny_det, tiny_data):
    spec = AttackSpec.make("vanilla", 8, steps=5)
    for s in tiny_data.samples[:3]:
        adv = pgd_attack(tiny_det, s.image, s.gt, spec)
        assert np.abs(adv.data - s.image.data).max() <= 8 / 255 + PIXEL_ULP
        before = sum(tiny_det.losses(s.image, s.gt).cls) + sum(tiny_det.losses(s.image, s.gt).reg)
        after = sum(tiny_det.losses(adv, s.gt).cls) + sum(tiny_det.losses(adv, s.gt).reg)
        assert after > before


def test_workers_do_not_change_output(tiny_det, tiny_data):
    items = [(s.image, s.gt) for s in tiny_data.samples[:6]]
    spec = AttackSpec.make("cls", 4, steps=3)
    one = attack_batch(tiny_det, items, spec, workers=1)
    three = attack_batch(tiny_det, items, spec, workers=3)
    assert all(np.array_equal(a.data, b.data) and a.id == b.id for a, b in zip(one, three))


def test_spec_round_trip():
    spec = AttackSpec.make("cwa", 4, Fraction(1, 3), 7, True, 11)
    assert AttackSpec.from_dict(spec.to_dict()) == spec
