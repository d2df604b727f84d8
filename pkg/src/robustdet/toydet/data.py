"""Seeded synthetic shapes-detection dataset."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..core import GroundTruthSet, PixelImage, Sample

CLASS_NAMES = ("rectangle", "ellipse", "triangle")
# rectangles and triangles are both polygons; used as the "similar class" grouping
SUPERCATEGORIES = {0: "polygon", 1: "round", 2: "polygon"}

MAX_OVERLAP = 0.2  # intersection / smaller-box area allowed between two objects
PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class ShapesDatasetSpec:
    n_images: int = 200
    image_size: int = 64
    num_classes: int = 3
    objects_per_image: tuple[int, int] = (1, 6)
    size_range: tuple[int, int] = (8, 60)
    noise: float = 0.04
    contrast: tuple[float, float] = (0.55, 1.0)
    crop_size: int = 32
    crop_margin: tuple[float, float] = (0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects_per_image", tuple(int(v) for v in self.objects_per_image))
        object.__setattr__(self, "size_range", tuple(int(v) for v in self.size_range))
        object.__setattr__(self, "contrast", tuple(float(v) for v in self.contrast))
        object.__setattr__(self, "crop_margin", tuple(float(v) for v in self.crop_margin))
        if self.n_images < 0:
            raise ValueError("n_images must be >= 0")
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in 1..{len(CLASS_NAMES)}")
        lo, hi = self.objects_per_image
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid objects_per_image {self.objects_per_image}")
        smin, smax = self.size_range
        if smin < 2 or smax < smin:
            raise ValueError(f"invalid size_range {self.size_range}")
        if smin > self.image_size:
            raise ValueError(f"objects of side {smin} cannot fit a {self.image_size}px image")

    @property
    def area_bands(self) -> tuple[float, float]:
        """Small/medium/large area thresholds scaled to the image size.

        COCO's 32^2 / 96^2 assume ~640px images; here the bands are a quarter
        and three quarters of the image side, squared (16^2 / 48^2 at 64px).
        """
        return ((self.image_size / 4) ** 2, (3 * self.image_size / 4) ** 2)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ShapesDataset:
    spec: ShapesDatasetSpec
    samples: list[Sample]
    crops: np.ndarray = field(repr=False)
    crop_labels: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i):
        return self.samples[i]


def _shape_mask(cls: int, x0: int, y0: int, w: int, h: int, size: int) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    u = (xs - x0) / w
    v = (ys - y0) / h
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if cls == 0:
        return inside
    if cls == 1:
        return (u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25
    # apex at the top centre, base along the bottom edge
    return inside & (np.abs(u - 0.5) <= 0.5 * v)


def _sample_side(rng, spec: ShapesDatasetSpec, allow_large: bool) -> tuple[int, int]:
    smin, smax = spec.size_range
    smax = min(smax, spec.image_size)
    s_lo, s_hi = (np.sqrt(b) for b in spec.area_bands)
    bands = [(smin, min(smax, s_lo)), (max(smin, s_lo), min(smax, s_hi)), (max(smin, s_hi), smax)]
    bands = [b for i, b in enumerate(bands) if b[1] > b[0] and (allow_large or i < 2)]
    if not bands:
        bands = [(smin, smax)]
    lo, hi = bands[rng.integers(len(bands))]
    s = rng.uniform(lo, hi)
    aspect = np.exp(rng.uniform(-0.25, 0.25))
    w = int(np.clip(round(s * np.sqrt(aspect)), smin, smax))
    h = int(np.clip(round(s / np.sqrt(aspect)), smin, smax))
    return w, h


def _render(spec: ShapesDatasetSpec, index: int) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    bg = rng.uniform(0.3, 0.7) + rng.uniform(-0.05, 0.05, size=3)
    img = np.broadcast_to(bg[:, None, None], (3, size, size)).astype(np.float64).copy()
    lo, hi = spec.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    first_cls = int(rng.integers(spec.num_classes))
    boxes, labels = [], []
    has_large = False
    large_area = spec.area_bands[1]
    for k in range(n_obj):
        placed = False
        for _ in range(PLACEMENT_TRIES):
            w, h = _sample_side(rng, spec, allow_large=not has_large)
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            box = (x0, y0, x0 + w, y0 + h)
            if all(_overlap(box, b) <= MAX_OVERLAP for b in boxes):
                placed = True
                break
        if not placed:
            if k < lo:
                raise ValueError(f"image {index}: cannot place {lo} objects of sizes "
                                 f"{spec.size_range} in a {size}px image")
            break
        boxes.append(box)
        labels.append((first_cls + k) % spec.num_classes)
        has_large |= w * h >= large_area
    order = sorted(range(len(boxes)), key=lambda i: -(boxes[i][2] - boxes[i][0]) * (boxes[i][3] - boxes[i][1]))
    boxes = [boxes[i] for i in order]
    labels = [labels[i] for i in order]
    for (x0, y0, x1, y1), c in zip(boxes, labels):
        mask = _shape_mask(c, x0, y0, x1 - x0, y1 - y0, size)
        shift = rng.uniform(*spec.contrast) * (1 if rng.random() < 0.5 else -1)
        color = np.clip(bg + shift + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        img[:, mask] = color[:, None]
    img += rng.normal(0.0, spec.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    gt = GroundTruthSet(np.asarray(boxes, dtype=np.float64).reshape(-1, 4), labels, image_size=(size, size))
    return Sample(PixelImage(img, id=f"{spec.seed}-{index:05d}"), gt)


def _overlap(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return iw * ih / smaller


def crop_objects(samples, crop_size: int, margin=(0.2, 0.2), seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Cut every gt object out of its image with a context margin and resize it.

    ``margin`` is a (lo, hi) range of per-side context as a fraction of the box
    side; drawing it at random varies the apparent object scale across crops.
    """
    import torch
    import torch.nn.functional as F

    lo, hi = (margin, margin) if np.isscalar(margin) else margin
    rng = np.random.default_rng([seed, 1])
    crops, labels = [], []
    for s in samples:
        _, h, w = s.image.shape
        for (x0, y0, x1, y1), c in zip(s.gt.boxes, s.gt.labels):
            m = rng.uniform(lo, hi) if hi > lo else lo
            mx, my = m * (x1 - x0), m * (y1 - y0)
            cx0, cy0 = int(max(0, np.floor(x0 - mx))), int(max(0, np.floor(y0 - my)))
            cx1, cy1 = int(min(w, np.ceil(x1 + mx))), int(min(h, np.ceil(y1 + my)))
            patch = torch.from_numpy(np.ascontiguousarray(s.image.data[:, cy0:cy1, cx0:cx1].copy()))[None]
            crops.append(F.interpolate(patch, size=(crop_size, crop_size), mode="bilinear",
                                       align_corners=False)[0].clamp_(0, 1).numpy())
            labels.append(int(c))
    if not crops:
        return np.zeros((0, 3, crop_size, crop_size), np.float32), np.zeros(0, np.int64)
    return np.stack(crops).astype(np.float32), np.asarray(labels, dtype=np.int64)


def generate_shapes_dataset(spec: ShapesDatasetSpec) -> ShapesDataset:
    """Build the detection split and the derived single-object classification split."""
    samples = [_render(spec, i) for i in range(spec.n_images)]
    crops, crop_labels = crop_objects(samples, spec.crop_size, spec.crop_margin, spec.seed)
    return ShapesDataset(spec, samples, crops, crop_labels)
