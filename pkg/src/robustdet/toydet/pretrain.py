"""Upstream (classification) pre-training of the toy backbone, benign or adversarial."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..core import AttackBudget
from .model import Backbone, ToyDetectorConfig


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 15
    lr: float = 2e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    attack_steps: int = 3
    attack_alpha_fraction: Fraction = Fraction(1, 2)
    random_start: bool = True
    eps_warmup_epochs: int = 5  # linear ramp of the attack radius; AT from scratch can stall without it

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attack_alpha_fraction"] = str(self.attack_alpha_fraction)
        return d


class Classifier(nn.Module):
    """Backbone + global average pool + linear probe."""

    def __init__(self, cfg: ToyDetectorConfig):
        super().__init__()
        self.backbone = Backbone(cfg.backbone_blocks, cfg.backbone_width)
        self.probe = nn.Linear(cfg.backbone_width, cfg.num_classes)

    def forward(self, x):
        return self.probe(self.backbone(x).mean(dim=(2, 3)))


def pgd_classifier(model: nn.Module, x: torch.Tensor, y: torch.Tensor, eps: float, alpha: float,
                   steps: int, generator: torch.Generator | None = None) -> torch.Tensor:
    """l-inf PGD on cross-entropy; random start iff ``generator`` is given."""
    if eps == 0 or steps == 0:
        return x
    if generator is not None:
        delta = (torch.rand(x.shape, generator=generator, dtype=x.dtype) * 2 - 1) * eps
    else:
        delta = torch.zeros_like(x)
    delta = (x + delta).clamp(0, 1) - x
    for _ in range(steps):
        delta.requires_grad_(True)
        loss = F.cross_entropy(model(x + delta), y, reduction="sum")
        (g,) = torch.autograd.grad(loss, delta)
        delta = (delta.detach() + alpha * g.sign()).clamp(-eps, eps)
        delta = (x + delta).clamp(0, 1) - x
    return (x + delta).detach()


def pretrain_toy_backbone(mode: str, crops: np.ndarray, labels: np.ndarray, det_cfg: ToyDetectorConfig,
                          budget: AttackBudget | None = None, seed: int = 0,
                          cfg: PretrainConfig = PretrainConfig()) -> dict:
    """Train backbone + linear probe on the crop classification split.

    ``mode="adversarial"`` runs PGD-AT (``cfg.attack_steps`` steps of
    ``attack_alpha_fraction * eps``); ``mode="benign"`` ignores ``budget``.
    Returns a checkpoint dict consumable by ``load_backbone_checkpoint``.
    """
    if mode not in ("benign", "adversarial"):
        raise ValueError(f"mode must be 'benign' or 'adversarial', got {mode!r}")
    if len(crops) == 0:
        raise ValueError("classification split is empty")
    budget = budget or AttackBudget(8)
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    model = Classifier(det_cfg)
    torch.random.set_rng_state(state)
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [int(cfg.epochs * 2 / 3), int(cfg.epochs * 5 / 6)], 0.1)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed) if cfg.random_start else None
    x_all = torch.from_numpy(np.ascontiguousarray(crops, dtype=np.float32))
    y_all = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    eps = budget.eps
    alpha = float(cfg.attack_alpha_fraction) * eps
    n_batches = -(-len(x_all) // cfg.batch_size)
    warm = max(1, cfg.eps_warmup_epochs * n_batches)
    it = 0
    for _ in range(cfg.epochs):
        perm = torch.from_numpy(rng.permutation(len(x_all)))
        for s in range(0, len(perm), cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            x, y = x_all[idx], y_all[idx]
            it += 1
            if mode == "adversarial":
                r = min(1.0, it / warm)
                x = pgd_classifier(model, x, y, r * eps, r * alpha, cfg.attack_steps, gen)
            loss = F.cross_entropy(model(x), y)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
        sched.step()
    return {
        "backbone": {k: v.detach().clone() for k, v in model.backbone.state_dict().items()},
        "probe": {k: v.detach().clone() for k, v in model.probe.state_dict().items()},
        "mode": mode,
        "epsilon": budget.epsilon if mode == "adversarial" else 0,
        "seed": seed,
        "detector_config": det_cfg.to_dict(),
        "pretrain_config": cfg.to_dict(),
    }


def classifier_from_checkpoint(ckpt: dict) -> Classifier:
    model = Classifier(ToyDetectorConfig(**ckpt["detector_config"]))
    model.backbone.load_state_dict(ckpt["backbone"])
    model.probe.load_state_dict(ckpt["probe"])
    return model.eval()


def classification_accuracy(ckpt: dict, crops: np.ndarray, labels: np.ndarray,
                            budget: AttackBudget | None = None, steps: int = 10) -> float:
    """Accuracy on clean crops, or under PGD when ``budget`` is given (alpha = budget.alpha)."""
    model = classifier_from_checkpoint(ckpt)
    x = torch.from_numpy(np.ascontiguousarray(crops, dtype=np.float32))
    y = torch.from_numpy(np.asarray(labels, dtype=np.int64))
    if budget is not None:
        x = pgd_classifier(model, x, y, budget.eps, budget.alpha, steps)
    with torch.no_grad():
        return float((model(x).argmax(1) == y).double().mean())
