"""PGD attacks on detectors: sign-gradient ascent projected onto the l-inf ball."""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .core import AttackBudget, DetectorHandle, GroundTruthSet, PixelImage, project_array
from .objectives import ObjectiveKind


class AttackError(RuntimeError):
    """An attack failed; the message names the offending image."""


class EmptyTargetWarning(UserWarning):
    """Attack skipped because the image has no ground-truth instance."""


@dataclass(frozen=True)
class AttackSpec:
    budget: AttackBudget = field(default_factory=AttackBudget)
    objective: ObjectiveKind = ObjectiveKind.CLS
    random_start: bool = False
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objective", ObjectiveKind.parse(self.objective))

    @classmethod
    def make(cls, objective="cls", eps: int = 8, alpha_fraction=Fraction(1, 4), steps: int = 20,
             random_start: bool = False, seed: int = 0) -> "AttackSpec":
        return cls(AttackBudget(eps, Fraction(alpha_fraction).limit_denominator(10_000), steps),
                   ObjectiveKind.parse(objective), random_start, seed)

    def to_dict(self) -> dict:
        b = self.budget
        return {"objective": self.objective.value, "epsilon": b.epsilon,
                "alpha_fraction": str(b.alpha_fraction), "steps": b.steps,
                "random_start": self.random_start, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls.make(d.get("objective", "cls"), int(d.get("epsilon", 8)),
                        Fraction(str(d.get("alpha_fraction", "1/4"))), int(d.get("steps", 20)),
                        bool(d.get("random_start", False)), int(d.get("seed", 0)))


def pgd_arrays(detector: DetectorHandle, xs: np.ndarray, gts: Sequence[GroundTruthSet],
               spec: AttackSpec) -> np.ndarray:
    """Run PGD on a stacked batch and return the adversarial batch.

    The gradient of each image's own objective drives its update, so images do
    not interact; results still depend on the batch size at the float level.
    """
    budget = spec.budget
    xs = np.asarray(xs, dtype=np.float32)
    eps, alpha = budget.eps, np.float32(budget.alpha)
    if spec.random_start:
        rng = np.random.default_rng(spec.seed)
        delta = np.stack([rng.uniform(-eps, eps, size=x.shape) for x in xs]).astype(np.float32)
        delta = project_array(delta, xs, eps)
    else:
        delta = np.zeros_like(xs)
    if eps == 0:
        return xs.copy()
    for _ in range(budget.steps):
        _, grad = detector.objective_and_gradient(spec.objective, np.clip(xs + delta, 0.0, 1.0), gts)
        if not np.all(np.isfinite(grad)):
            raise AttackError("diverged objective")
        delta = project_array(delta + alpha * np.sign(grad).astype(np.float32), xs, eps)
    return np.clip(xs + delta, 0.0, 1.0)


def pgd_attack(detector: DetectorHandle, x: PixelImage, gt: GroundTruthSet, spec: AttackSpec) -> PixelImage:
    """Untargeted PGD maximizing ``spec.objective`` against the ground truth ``gt``.

    delta starts at zero (or uniform in the ball when ``random_start``) and
    takes ``steps`` updates ``delta <- project(delta + alpha * sign(grad))``.
    An image without instances is returned unchanged with an
    :class:`EmptyTargetWarning`.
    """
    if gt.K == 0:
        warnings.warn(f"image {x.id!r} has no instances; returned unchanged", EmptyTargetWarning, stacklevel=2)
        return x
    adv = pgd_arrays(detector, x.data[None], [gt], spec)[0]
    return PixelImage(adv, x.id)


def attack_batch(detector: DetectorHandle, items: Sequence[tuple[PixelImage, GroundTruthSet]],
                 spec: AttackSpec, workers: int = 1) -> list[PixelImage]:
    """:func:`pgd_attack` over many images; output does not depend on ``workers``."""
    items = list(items)
    if not items:
        raise ValueError("attack_batch needs at least one image")

    def one(item):
        x, gt = item
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", EmptyTargetWarning)
                return pgd_attack(detector, x, gt, spec)
        except Exception as exc:
            raise AttackError(f"image {x.id!r}: {exc}") from exc

    if workers <= 1:
        return [one(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, items))
