"""Domain types, the detector contract and l-inf budget projection."""

from __future__ import annotations

import abc
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

# One float32 ulp at 1.0; the slack allowed when checking budgets on float32 pixels.
PIXEL_ULP = float(np.finfo(np.float32).eps)


class ContractError(ValueError):
    """A value violates the invariants of a core type or operation."""


@dataclass(frozen=True, eq=False)
class PixelImage:
    """Image with pixels in [0, 1], stored channels-first as float32."""

    data: np.ndarray
    id: str = ""

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 3:
            raise ContractError(f"image {self.id!r}: expected CxHxW array, got shape {arr.shape}")
        c, h, w = arr.shape
        if c not in (1, 3) or h < 1 or w < 1:
            raise ContractError(f"image {self.id!r}: invalid shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < 0.0 or arr.max() > 1.0:
            raise ContractError(f"image {self.id!r}: pixel values outside [0, 1]")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


def _as_boxes(boxes) -> np.ndarray:
    arr = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GroundTruthSet:
    """Labeled boxes (xmin, ymin, xmax, ymax) in pixel units."""

    boxes: np.ndarray
    labels: np.ndarray
    image_size: tuple[int, int] | None = None  # (height, width), for bounds checks

    def __post_init__(self):
        boxes = _as_boxes(self.boxes)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        labels.setflags(write=False)
        if len(boxes) != len(labels):
            raise ContractError("boxes and labels differ in length")
        if len(boxes):
            if np.any(boxes[:, 0] >= boxes[:, 2]) or np.any(boxes[:, 1] >= boxes[:, 3]):
                raise ContractError("ground-truth box with xmin >= xmax or ymin >= ymax")
            if np.any(labels < 0):
                raise ContractError("negative class index")
            if self.image_size is not None:
                h, w = self.image_size
                if boxes.min() < 0 or np.any(boxes[:, 2] > w) or np.any(boxes[:, 3] > h):
                    raise ContractError("ground-truth box outside image bounds")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "labels", labels)

    @property
    def K(self) -> int:
        return len(self.labels)

    def __len__(self) -> int:
        return self.K

    @property
    def areas(self) -> np.ndarray:
        b = self.boxes
        return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


@dataclass(frozen=True, eq=False)
class DetectionSet:
    """Predicted boxes, labels and confidence scores."""

    boxes: np.ndarray
    labels: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        boxes = _as_boxes(self.boxes)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        if not (len(boxes) == len(labels) == len(scores)):
            raise ContractError("boxes, labels and scores differ in length")
        if len(scores) and (not np.all(np.isfinite(scores)) or scores.min() < 0 or scores.max() > 1):
            raise ContractError("detection scores must lie in [0, 1]")
        for a in (labels, scores):
            a.setflags(write=False)
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "scores", scores)

    def __len__(self) -> int:
        return len(self.scores)

    @classmethod
    def empty(cls) -> "DetectionSet":
        return cls(np.zeros((0, 4)), np.zeros(0, dtype=np.int64), np.zeros(0))


@dataclass(frozen=True)
class AttackBudget:
    """l-inf budget; ``epsilon`` is on the 0-255 scale."""

    epsilon: int = 8
    alpha_fraction: Fraction = Fraction(1, 4)
    steps: int = 20
    norm: str = "linf"

    def __post_init__(self):
        if int(self.epsilon) != self.epsilon or not 0 <= self.epsilon <= 255:
            raise ContractError(f"epsilon must be an integer in [0, 255], got {self.epsilon}")
        frac = Fraction(self.alpha_fraction).limit_denominator(10_000)
        if frac <= 0:
            raise ContractError("alpha_fraction must be positive")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ContractError("steps must be a positive integer")
        if self.norm != "linf":
            raise ContractError(f"unsupported norm {self.norm!r}")
        object.__setattr__(self, "epsilon", int(self.epsilon))
        object.__setattr__(self, "steps", int(self.steps))
        object.__setattr__(self, "alpha_fraction", frac)

    @property
    def eps(self) -> float:
        """Budget in [0, 1] pixel units."""
        return self.epsilon / 255.0

    @property
    def alpha(self) -> float:
        """Step size in [0, 1] pixel units."""
        return float(self.alpha_fraction * self.epsilon) / 255.0


@dataclass(frozen=True, eq=False)
class Perturbation:
    """Additive noise for one image, tagged with the budget it was projected to."""

    delta: np.ndarray
    epsilon: int

    def __post_init__(self):
        arr = np.asarray(self.delta, dtype=np.float32)
        arr.setflags(write=False)
        object.__setattr__(self, "delta", arr)

    @classmethod
    def zeros_like(cls, x: PixelImage, epsilon: int) -> "Perturbation":
        return cls(np.zeros(x.shape, dtype=np.float32), epsilon)


@dataclass(frozen=True)
class PerInstanceLosses:
    """Per ground-truth instance classification and regression losses."""

    cls: tuple[float, ...]
    reg: tuple[float, ...]

    def __post_init__(self):
        cls_ = tuple(float(v) for v in self.cls)
        reg = tuple(float(v) for v in self.reg)
        if len(cls_) != len(reg):
            raise ContractError("cls and reg loss lists differ in length")
        for v in cls_ + reg:
            if not np.isfinite(v) or v < 0:
                raise ContractError(f"per-instance loss must be finite and >= 0, got {v}")
        object.__setattr__(self, "cls", cls_)
        object.__setattr__(self, "reg", reg)

    @property
    def K(self) -> int:
        return len(self.cls)


def project_to_budget(delta: Perturbation | np.ndarray, x: PixelImage | np.ndarray,
                      budget: AttackBudget) -> Perturbation:
    """Clamp ``delta`` into the eps-ball, then keep ``x + delta`` inside [0, 1]."""
    d = delta.delta if isinstance(delta, Perturbation) else np.asarray(delta, dtype=np.float32)
    xa = x.data if isinstance(x, PixelImage) else np.asarray(x, dtype=np.float32)
    if d.shape != xa.shape:
        raise ContractError(f"perturbation shape {d.shape} does not match image shape {xa.shape}")
    return Perturbation(project_array(d, xa, budget.eps), budget.epsilon)


def project_array(delta: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    """Array form of :func:`project_to_budget`; broadcasts over leading batch axes."""
    eps32 = np.float32(eps)
    d = np.clip(delta.astype(np.float32, copy=False), -eps32, eps32)
    x32 = x.astype(np.float32, copy=False)
    d = np.clip(x32 + d, 0.0, 1.0) - x32
    # Rounding in (x + d) - x can overshoot eps by an ulp; clamp again.
    return np.clip(d, -eps32, eps32).astype(np.float32, copy=False)


def apply_perturbation(x: PixelImage, delta: Perturbation) -> PixelImage:
    """Return ``x + delta`` after checking that ``delta`` is already projected."""
    if delta.delta.shape != x.shape:
        raise ContractError(f"perturbation shape {delta.delta.shape} does not match image shape {x.shape}")
    eps = delta.epsilon / 255.0
    if np.abs(delta.delta).max(initial=0.0) > eps + PIXEL_ULP:
        raise ContractError("perturbation exceeds its l-inf budget; project it first")
    raw = x.data + delta.delta
    if raw.min() < -PIXEL_ULP or raw.max() > 1.0 + PIXEL_ULP:
        raise ContractError("x + delta leaves [0, 1]; project it first")
    return PixelImage(np.clip(raw, 0.0, 1.0), x.id)


def linf_distance(a: PixelImage | np.ndarray, b: PixelImage | np.ndarray) -> float:
    aa = a.data if isinstance(a, PixelImage) else a
    bb = b.data if isinstance(b, PixelImage) else b
    return float(np.abs(aa.astype(np.float64) - bb.astype(np.float64)).max(initial=0.0))


class DetectorHandle(abc.ABC):
    """What the attack, training and evaluation code needs from a detector.

    Parameters are split into two tagged groups, ``"backbone"`` and ``"head"``.
    Gradients are taken through the whole model.
    """

    @abc.abstractmethod
    def param_groups(self) -> dict[str, list]:
        """Map of group tag ("backbone" / "head") to trainable parameters."""

    @abc.abstractmethod
    def losses(self, x: PixelImage, gt: GroundTruthSet) -> PerInstanceLosses:
        ...

    @abc.abstractmethod
    def detect(self, x: PixelImage) -> DetectionSet:
        ...

    @abc.abstractmethod
    def input_gradient(self, objective, x: PixelImage, gt: GroundTruthSet,
                       weights: Sequence[float] | None = None) -> np.ndarray:
        """Gradient of ``objective`` evaluated on this detector w.r.t. the pixels of ``x``."""

    def objective_and_gradient(self, objective, xs: np.ndarray, gts: Sequence[GroundTruthSet]
                               ) -> tuple[np.ndarray, np.ndarray]:
        """Batched (values, gradients) for ``xs`` of shape NxCxHxW.

        The default loops over :meth:`input_gradient`; detectors that can batch
        should override it.
        """
        from .objectives import cwa_weights, needs_weights, objective_value

        grads = np.empty_like(xs, dtype=np.float32)
        values = np.empty(len(xs))
        for i, (xi, gt) in enumerate(zip(xs, gts)):
            img = PixelImage(xi)
            w = cwa_weights(gt.labels) if needs_weights(objective) else None
            grads[i] = self.input_gradient(objective, img, gt, w)
            values[i] = objective_value(objective, self.losses(img, gt), w)
        return values, grads

    def detect_batch(self, xs: np.ndarray) -> list[DetectionSet]:
        return [self.detect(PixelImage(x)) for x in xs]


def stack_images(images: Iterable[PixelImage]) -> np.ndarray:
    return np.stack([im.data for im in images]).astype(np.float32, copy=False)


@dataclass
class Sample:
    """One (image, ground truth) pair of a detection dataset."""

    image: PixelImage
    gt: GroundTruthSet = field(default_factory=lambda: GroundTruthSet(np.zeros((0, 4)), []))
