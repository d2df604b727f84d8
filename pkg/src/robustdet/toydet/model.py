"""A tiny single-scale anchor-free detector implementing ``DetectorHandle``."""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import DetectionSet, DetectorHandle, GroundTruthSet, PerInstanceLosses, PixelImage
from ..metrics import kernels
from ..objectives import ObjectiveKind, combine, cwa_weights

STRIDE = 8
N_DOWNSAMPLE = 3  # the first three backbone blocks halve the resolution


@dataclass(frozen=True)
class ToyDetectorConfig:
    backbone_blocks: int = 4
    backbone_width: int = 32
    head_layers: int = 2
    head_width: int = 32
    num_classes: int = 3
    head_kernel: int = 3
    image_size: int = 64
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 100

    def __post_init__(self):
        if self.backbone_blocks < N_DOWNSAMPLE:
            raise ValueError(f"backbone_blocks must be >= {N_DOWNSAMPLE}")
        for name in ("backbone_width", "head_width", "num_classes", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.head_layers < 0:
            raise ValueError("head_layers must be >= 0")
        if self.head_kernel not in (1, 3):
            raise ValueError("head_kernel must be 1 or 3")
        if self.image_size % STRIDE:
            raise ValueError(f"image_size must be a multiple of {STRIDE}")

    @property
    def grid(self) -> int:
        return self.image_size // STRIDE

    def to_dict(self) -> dict:
        return asdict(self)


def conv_params(k: int, cin: int, cout: int) -> int:
    return k * k * cin * cout + cout


def backbone_param_count(cfg: ToyDetectorConfig) -> int:
    w = cfg.backbone_width
    return conv_params(3, 3, w) + (cfg.backbone_blocks - 1) * conv_params(3, w, w)


def head_param_count(cfg: ToyDetectorConfig) -> int:
    k, wb, wh = cfg.head_kernel, cfg.backbone_width, cfg.head_width
    n, cin = 0, wb
    for _ in range(cfg.head_layers):
        n += conv_params(k, cin, wh)
        cin = wh
    return n + conv_params(1, cin, cfg.num_classes + 1) + conv_params(1, cin, 4)


PIXEL_MEAN, PIXEL_STD = 0.5, 0.25


class Backbone(nn.Module):
    def __init__(self, blocks: int, width: int):
        super().__init__()
        layers, cin = [], 3
        for i in range(blocks):
            layers += [nn.Conv2d(cin, width, 3, stride=2 if i < N_DOWNSAMPLE else 1, padding=1), nn.SiLU()]
            cin = width
        self.body = nn.Sequential(*layers)
        self.out_channels = width

    def forward(self, x):
        # fixed pixel standardization, as detectors do with dataset mean/std
        return self.body((x - PIXEL_MEAN) / PIXEL_STD)


class Head(nn.Module):
    def __init__(self, cin: int, layers: int, width: int, kernel: int, num_classes: int):
        super().__init__()
        tower = []
        for _ in range(layers):
            tower += [nn.Conv2d(cin, width, kernel, padding=kernel // 2), nn.SiLU()]
            cin = width
        self.tower = nn.Sequential(*tower)
        self.cls = nn.Conv2d(cin, num_classes + 1, 1)
        self.reg = nn.Conv2d(cin, 4, 1)

    def forward(self, f):
        f = self.tower(f)
        return self.cls(f), self.reg(f)


class ToyNet(nn.Module):
    def __init__(self, cfg: ToyDetectorConfig):
        super().__init__()
        self.backbone = Backbone(cfg.backbone_blocks, cfg.backbone_width)
        self.head = Head(cfg.backbone_width, cfg.head_layers, cfg.head_width, cfg.head_kernel, cfg.num_classes)

    def forward(self, x):
        return self.head(self.backbone(x))


@dataclass
class _Targets:
    """Cell assignment for a batch, flattened over images."""

    bg_cells: torch.Tensor      # (B, G*G) bool: cell belongs to no instance
    pair_inst: torch.Tensor     # (P,) global instance index of each (instance, cell) pair
    pair_flat: torch.Tensor     # (P,) flat index b * G*G + cell
    pair_label: torch.Tensor    # (P,) class index + 1 (0 is background)
    pair_reg: torch.Tensor      # (P, 4) regression target in stride units
    inst_image: torch.Tensor    # (K_total,) image index of each instance
    n_inst: int


def assign_cells(gt: GroundTruthSet, grid: int):
    """Instance index per cell (-1 = background) and per-instance cell lists.

    A gt claims every cell whose centre lies inside its box; contested cells go
    to the smallest box. An instance left with no cell falls back to the cell
    containing its box centre (shared, used for its own losses only).
    """
    centers = (np.arange(grid) + 0.5) * STRIDE
    owner = np.full((grid, grid), -1, dtype=np.int64)
    owner_area = np.full((grid, grid), np.inf)
    areas = gt.areas
    for i in np.argsort(-areas, kind="stable"):
        x0, y0, x1, y1 = gt.boxes[i]
        cols = (centers >= x0) & (centers < x1)
        rows = (centers >= y0) & (centers < y1)
        m = rows[:, None] & cols[None, :] & (areas[i] <= owner_area)
        owner[m] = i
        owner_area[m] = areas[i]
    owner = owner.reshape(-1)
    cells = []
    for i in range(gt.K):
        own = np.flatnonzero(owner == i)
        if own.size == 0:
            x0, y0, x1, y1 = gt.boxes[i]
            cx = min(int((x0 + x1) / 2 // STRIDE), grid - 1)
            cy = min(int((y0 + y1) / 2 // STRIDE), grid - 1)
            own = np.array([cy * grid + cx])
        cells.append(own)
    return owner, cells


class ToyDetector(DetectorHandle):
    """Dense single-scale detector: per-cell (background + classes) logits and ltrb offsets.

    Per-instance losses are the mean cross-entropy and mean L1 box error over
    the instance's cells; background cells contribute a separate term that is
    only used for training.
    """

    def __init__(self, cfg: ToyDetectorConfig, seed: int = 0, dtype=torch.float32):
        self.cfg = cfg
        self.seed = seed
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.net = ToyNet(cfg).to(dtype)
        torch.random.set_rng_state(gen_state)
        self.net.eval()
        self._target_cache: dict[int, tuple] = {}

    # ------------------------------------------------------------ contract bits
    def param_groups(self) -> dict[str, list[nn.Parameter]]:
        return {"backbone": list(self.net.backbone.parameters()), "head": list(self.net.head.parameters())}

    def named_param_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        return {"backbone": dict(self.net.backbone.named_parameters()),
                "head": dict(self.net.head.named_parameters())}

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    def to(self, dtype) -> "ToyDetector":
        self.net.to(dtype)
        return self

    def param_counts(self) -> dict[str, int]:
        return {g: sum(p.numel() for p in ps) for g, ps in self.param_groups().items()}

    def state_dict(self) -> dict:
        return {k: v.detach().clone() for k, v in self.net.state_dict().items()}

    def load_state_dict(self, state: dict) -> None:
        self.net.load_state_dict(state)

    def clone(self) -> "ToyDetector":
        other = ToyDetector(self.cfg, self.seed, self.dtype)
        other.load_state_dict(self.state_dict())
        return other

    # --------------------------------------------------------------- targets
    def _targets(self, gts: Sequence[GroundTruthSet]) -> _Targets:
        g = self.cfg.grid
        gg = g * g
        centers = (np.arange(g) + 0.5) * STRIDE
        bg, p_inst, p_flat, p_label, p_reg, inst_image = [], [], [], [], [], []
        offset = 0
        for b, gt in enumerate(gts):
            key = id(gt)
            cached = self._target_cache.get(key)
            if cached is None or cached[0] is not gt:
                owner, cells = assign_cells(gt, g)
                cached = (gt, owner, cells)
                if len(self._target_cache) > 4096:
                    self._target_cache.clear()
                self._target_cache[key] = cached
            _, owner, cells = cached
            bg.append(owner < 0)
            for i, own in enumerate(cells):
                cy, cx = centers[own // g], centers[own % g]
                x0, y0, x1, y1 = gt.boxes[i]
                p_inst.append(np.full(len(own), offset + i))
                p_flat.append(b * gg + own)
                p_label.append(np.full(len(own), gt.labels[i] + 1))
                p_reg.append(np.stack([cx - x0, cy - y0, x1 - cx, y1 - cy], axis=1) / STRIDE)
                inst_image.append(b)
            offset += gt.K
        cat = lambda xs, dt: torch.from_numpy(np.concatenate(xs).astype(dt)) if xs else torch.zeros(0, dtype=torch.int64)
        return _Targets(
            bg_cells=torch.from_numpy(np.stack(bg)) if bg else torch.zeros(0, gg, dtype=torch.bool),
            pair_inst=cat(p_inst, np.int64), pair_flat=cat(p_flat, np.int64),
            pair_label=cat(p_label, np.int64),
            pair_reg=torch.from_numpy(np.concatenate(p_reg)).to(self.dtype) if p_reg else torch.zeros(0, 4, dtype=self.dtype),
            inst_image=torch.as_tensor(inst_image, dtype=torch.int64), n_inst=offset)

    def _as_tensor(self, xs) -> torch.Tensor:
        if isinstance(xs, torch.Tensor):
            return xs.to(self.dtype)
        xs = np.ascontiguousarray(xs)
        if not xs.flags.writeable:
            xs = xs.copy()
        return torch.from_numpy(xs).to(self.dtype)

    # ---------------------------------------------------------------- losses
    def loss_terms(self, xb: torch.Tensor, gts: Sequence[GroundTruthSet]):
        """Differentiable per-instance (cls, reg) losses and per-image background loss.

        Returns ``(cls, reg, inst_image, bg)`` where ``cls``/``reg`` have one
        entry per instance over the whole batch.
        """
        logits, reg = self.net(xb)
        b, c1 = logits.shape[:2]
        logits = logits.permute(0, 2, 3, 1).reshape(-1, c1)
        reg = reg.permute(0, 2, 3, 1).reshape(-1, 4)
        t = self._targets(gts)
        ce_bg = F.cross_entropy(logits, torch.zeros(len(logits), dtype=torch.int64), reduction="none").view(b, -1)
        bg_mask = t.bg_cells.to(ce_bg.dtype)
        bg = (ce_bg * bg_mask).sum(1) / bg_mask.sum(1).clamp(min=1)
        if t.n_inst == 0:
            empty = logits.new_zeros(0)
            return empty, empty, t.inst_image, bg
        ce = F.cross_entropy(logits[t.pair_flat], t.pair_label, reduction="none")
        l1 = (reg[t.pair_flat] - t.pair_reg).abs().mean(1)
        counts = torch.bincount(t.pair_inst, minlength=t.n_inst).to(ce.dtype)
        cls = torch.zeros(t.n_inst, dtype=ce.dtype).index_add(0, t.pair_inst, ce) / counts
        regl = torch.zeros(t.n_inst, dtype=ce.dtype).index_add(0, t.pair_inst, l1) / counts
        return cls, regl, t.inst_image, bg

    def objective_tensor(self, kind, xb: torch.Tensor, gts: Sequence[GroundTruthSet],
                         weights: Sequence[np.ndarray] | None = None) -> torch.Tensor:
        """Per-image objective values (shape (B,)) inside the autograd graph."""
        kind = ObjectiveKind.parse(kind)
        cls, reg, inst_image, bg = self.loss_terms(xb, gts)
        return self._reduce(kind, cls, reg, inst_image, gts, weights, xb.shape[0])

    def _reduce(self, kind, cls, reg, inst_image, gts, weights, batch):
        out = []
        start = 0
        for b, gt in enumerate(gts):
            k = gt.K
            if k == 0:
                out.append(cls.new_zeros(()))
                continue
            w = None
            if kind is ObjectiveKind.CWA:
                w_np = weights[b] if weights is not None else cwa_weights(gt.labels)
                w = torch.as_tensor(np.asarray(w_np), dtype=cls.dtype)
            out.append(combine(kind, cls[start:start + k], reg[start:start + k], w))
            start += k
        return torch.stack(out) if out else cls.new_zeros(0)

    def training_loss(self, xb: torch.Tensor, gts: Sequence[GroundTruthSet], kind=ObjectiveKind.VANILLA
                      ) -> torch.Tensor:
        """Batch-mean of (instance objective + background loss)."""
        kind = ObjectiveKind.parse(kind)
        cls, reg, inst_image, bg = self.loss_terms(xb, gts)
        obj = self._reduce(kind, cls, reg, inst_image, gts, None, xb.shape[0])
        return (obj + bg).mean()

    def losses(self, x: PixelImage, gt: GroundTruthSet) -> PerInstanceLosses:
        with torch.no_grad():
            cls, reg, _, _ = self.loss_terms(self._as_tensor(x.data[None]), [gt])
        return PerInstanceLosses(cls.tolist(), reg.tolist())

    def input_gradient(self, objective, x: PixelImage, gt: GroundTruthSet, weights=None) -> np.ndarray:
        xb = self._as_tensor(x.data[None]).requires_grad_(True)
        w = None if weights is None else [np.asarray(weights)]
        val = self.objective_tensor(objective, xb, [gt], w).sum()
        (grad,) = torch.autograd.grad(val, xb)
        return grad[0].numpy().astype(np.float32) if self.dtype == torch.float32 else grad[0].numpy()

    def objective_and_gradient(self, objective, xs: np.ndarray, gts: Sequence[GroundTruthSet]):
        xb = self._as_tensor(xs).requires_grad_(True)
        vals = self.objective_tensor(objective, xb, gts)
        (grad,) = torch.autograd.grad(vals.sum(), xb)
        return vals.detach().numpy().astype(np.float64), grad.numpy()

    def objective_values(self, objective, xs: np.ndarray, gts: Sequence[GroundTruthSet]) -> np.ndarray:
        with torch.no_grad():
            return self.objective_tensor(objective, self._as_tensor(xs), gts).numpy().astype(np.float64)

    # ------------------------------------------------------------- inference
    def detect(self, x: PixelImage) -> DetectionSet:
        return self.detect_batch(x.data[None])[0]

    def detect_batch(self, xs: np.ndarray, chunk: int = 256) -> list[DetectionSet]:
        out = []
        for s in range(0, len(xs), chunk):
            with torch.no_grad():
                logits, reg = self.net(self._as_tensor(xs[s:s + chunk]))
            probs = torch.softmax(logits.double(), dim=1)[:, 1:].numpy()
            reg = reg.double().numpy()
            out.extend(self._decode(p, r) for p, r in zip(probs, reg))
        return out

    def _decode(self, probs: np.ndarray, reg: np.ndarray) -> DetectionSet:
        cfg = self.cfg
        g = cfg.grid
        centers = (np.arange(g) + 0.5) * STRIDE
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        boxes = np.stack([cx - reg[0] * STRIDE, cy - reg[1] * STRIDE,
                          cx + reg[2] * STRIDE, cy + reg[3] * STRIDE], axis=-1).reshape(-1, 4)
        boxes = np.clip(boxes, 0, cfg.image_size)
        valid = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
        centerness = _centerness(reg.reshape(4, -1).T)
        all_boxes, all_labels, all_scores = [], [], []
        for c in range(cfg.num_classes):
            sc = probs[c].reshape(-1) * centerness
            cand = np.flatnonzero(valid & (sc > cfg.score_threshold))
            if cand.size == 0:
                continue
            order = cand[np.argsort(-sc[cand], kind="stable")]
            keep = kernels.nms(boxes, order, cfg.nms_iou)
            all_boxes.append(boxes[keep])
            all_scores.append(sc[keep])
            all_labels.append(np.full(len(keep), c))
        if not all_scores:
            return DetectionSet.empty()
        boxes, scores, labels = (np.concatenate(v) for v in (all_boxes, all_scores, all_labels))
        top = np.argsort(-scores, kind="stable")[:cfg.max_detections]
        return DetectionSet(boxes[top], labels[top], scores[top])


def _centerness(ltrb: np.ndarray) -> np.ndarray:
    # sqrt(min(l,r)/max(l,r) * min(t,b)/max(t,b)) of the predicted offsets; 0 if any is negative
    d = np.maximum(ltrb, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        lr = np.minimum(d[:, 0], d[:, 2]) / np.maximum(d[:, 0], d[:, 2])
        tb = np.minimum(d[:, 1], d[:, 3]) / np.maximum(d[:, 1], d[:, 3])
    return np.sqrt(np.nan_to_num(lr * tb, nan=0.0))


def build_toy_detector(cfg: ToyDetectorConfig, seed: int = 0) -> ToyDetector:
    return ToyDetector(cfg, seed)


def _positive_root(a: float, b: float, c: float) -> float:
    if a == 0:
        return -c / b
    return (-b + np.sqrt(b * b - 4 * a * c)) / (2 * a)


def reallocation_variants(budget: int, shares, base: ToyDetectorConfig = ToyDetectorConfig(),
                          tolerance: float = 0.1) -> list[ToyDetectorConfig]:
    """Configs of (roughly) equal parameter count with different backbone/head splits.

    Each ``(backbone_share, head_share)`` pair fixes the backbone width by
    solving the backbone parameter count for ``backbone_share * budget``, then
    the head width for the remainder. Depths and kernels come from ``base``.
    Raises ``ValueError`` when a share cannot be met within ``tolerance``.
    """
    out = []
    blocks, layers, k, c = base.backbone_blocks, base.head_layers, base.head_kernel, base.num_classes
    for share in shares:
        bb_share, head_share = (float(v) for v in share)
        if bb_share <= 0 or head_share < 0 or abs(bb_share + head_share - 1.0) > 1e-9:
            raise ValueError(f"shares {share} must be positive and sum to 1")
        # backbone: 28w + (blocks-1)(9w^2 + w)
        w = max(1, round(_positive_root(9 * (blocks - 1), 28 + (blocks - 1), -bb_share * budget)))
        h = base.head_width
        if layers:
            # head: k^2 w h + h + (layers-1)(k^2 h^2 + h) + (h+1)(c+5)
            root = _positive_root((layers - 1) * k * k, k * k * w + 1 + (layers - 1) + (c + 5),
                                  (c + 5) - head_share * budget)
            h = max(1, round(root))
        cfg = replace(base, backbone_width=int(w), head_width=int(h))
        total = backbone_param_count(cfg) + head_param_count(cfg)
        if abs(total - budget) > tolerance * budget:
            raise ValueError(f"budget {budget} infeasible for shares {share}: closest config has {total} parameters")
        out.append(cfg)
    return out
