"""End-to-end toy pipeline: datasets, upstream backbones and downstream recipes per seed."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from ..core import AttackBudget
from ..training import RecipeConfig, free_at_train, load_backbone_checkpoint, pgd_at_train, standard_train
from .data import ShapesDataset, ShapesDatasetSpec, crop_objects, generate_shapes_dataset
from .model import ToyDetector, ToyDetectorConfig
from .pretrain import PretrainConfig, pretrain_toy_backbone

log = logging.getLogger(__name__)

CONTRAST = (0.15, 0.4)


def _default_recipe() -> RecipeConfig:
    # 160 equivalent epochs on 128 images; decay after 2/3 and 5/6 of training as in the 16/20-of-24 schedule
    return RecipeConfig(epochs_equivalent=160, base_lr=5e-3, lr_milestones=(106, 133))


@dataclass(frozen=True)
class ToyPipelineConfig:
    """Settings of the desk-scale pipeline. Split seeds are offsets; the run seed is added to each."""

    upstream: ShapesDatasetSpec = ShapesDatasetSpec(n_images=2000, contrast=CONTRAST, crop_size=48,
                                                    crop_margin=(0.1, 1.2), seed=100)
    train: ShapesDatasetSpec = ShapesDatasetSpec(n_images=128, contrast=CONTRAST, seed=200)
    test: ShapesDatasetSpec = ShapesDatasetSpec(n_images=96, contrast=CONTRAST, seed=300)
    detector: ToyDetectorConfig = ToyDetectorConfig(backbone_width=48)
    pretrain: PretrainConfig = PretrainConfig()
    pretrain_epsilon: int = 8
    recipe: RecipeConfig = field(default_factory=_default_recipe)

    def to_dict(self) -> dict:
        return {"upstream": self.upstream.to_dict(), "train": self.train.to_dict(), "test": self.test.to_dict(),
                "detector": self.detector.to_dict(), "pretrain": self.pretrain.to_dict(),
                "pretrain_epsilon": self.pretrain_epsilon, "recipe": self.recipe.to_dict()}


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


class ToyWorkbench:
    """Memoizes datasets and pre-trained backbones so experiments can share them.

    With ``cache_dir`` set, backbone checkpoints are also kept on disk under a
    key that hashes every setting they depend on.
    """

    def __init__(self, cfg: ToyPipelineConfig | None = None, cache_dir: str | Path | None = None):
        self.cfg = cfg or ToyPipelineConfig()
        self.cache_dir = Path(cache_dir) if cache_dir else None
        self._data: dict = {}
        self._backbones: dict = {}

    # ------------------------------------------------------------------ data
    def data(self, split: str, seed: int) -> ShapesDataset:
        if split not in ("upstream", "train", "test"):
            raise ValueError(f"unknown split {split!r}")
        key = (split, seed)
        if key not in self._data:
            spec = getattr(self.cfg, split)
            self._data[key] = generate_shapes_dataset(replace(spec, seed=spec.seed + seed))
        return self._data[key]

    # ------------------------------------------------------------- backbones
    def backbone(self, mode: str, seed: int, det_cfg: ToyDetectorConfig | None = None) -> dict | None:
        """Checkpoint for a ``backbone_init`` tag (``None`` for ``random``)."""
        det_cfg = det_cfg or self.cfg.detector
        if mode == "random":
            return None
        if mode in ("upstream_adversarial", "upstream_benign"):
            split, kind = "upstream", mode.split("_")[1]
        elif mode == "downstream_benign":
            split, kind = "train", "benign"
        else:
            raise ValueError(f"unknown backbone_init {mode!r}")
        spec = getattr(self.cfg, split)
        # heads of any shape share one checkpoint, so only backbone fields enter the key
        arch = {k: getattr(det_cfg, k) for k in ("backbone_blocks", "backbone_width", "num_classes", "image_size")}
        desc = {"split": split, "kind": kind, "seed": seed, "data": spec.to_dict(), "arch": arch,
                "pretrain": self.cfg.pretrain.to_dict(), "eps": self.cfg.pretrain_epsilon}
        key = _digest(desc)
        if key in self._backbones:
            return self._backbones[key]
        path = self.cache_dir / f"backbone-{key}.pt" if self.cache_dir else None
        if path is not None and path.exists():
            ckpt = torch.load(path, weights_only=False)
        else:
            ds = self.data(split, seed)
            if split == "train":
                # downstream crops use the upstream cropping recipe
                crops, labels = crop_objects(ds.samples, self.cfg.upstream.crop_size, self.cfg.upstream.crop_margin,
                                             seed)
            else:
                crops, labels = ds.crops, ds.crop_labels
            log.info("pre-training %s backbone (seed %d, %d crops)", mode, seed, len(crops))
            ckpt = pretrain_toy_backbone(kind, crops, labels, det_cfg, AttackBudget(self.cfg.pretrain_epsilon),
                                         seed=seed, cfg=self.cfg.pretrain)
            if path is not None:
                path.parent.mkdir(parents=True, exist_ok=True)
                torch.save(ckpt, path)
        self._backbones[key] = ckpt
        return ckpt

    # --------------------------------------------------------------- training
    def build(self, seed: int, backbone_init: str, det_cfg: ToyDetectorConfig | None = None,
              backbone_seed: int | None = None) -> ToyDetector:
        det_cfg = det_cfg or self.cfg.detector
        det = ToyDetector(det_cfg, seed)
        ckpt = self.backbone(backbone_init, seed if backbone_seed is None else backbone_seed, det_cfg)
        load_backbone_checkpoint(det, ckpt, backbone_init)
        return det

    def train(self, recipe: RecipeConfig | None = None, seed: int = 0, method: str = "free",
              det_cfg: ToyDetectorConfig | None = None, backbone_seed: int | None = None,
              **method_kw) -> tuple[ToyDetector, object]:
        """Build, initialize and train one detector; ``method`` is free / pgd / standard."""
        recipe = recipe or self.cfg.recipe
        det = self.build(seed, recipe.backbone_init, det_cfg, backbone_seed)
        samples = self.data("train", seed).samples
        if method == "free":
            state = free_at_train(det, samples, recipe, seed)
        elif method == "standard":
            state = standard_train(det, samples, recipe, seed)
        elif method == "pgd":
            state = pgd_at_train(det, samples, recipe, seed=seed, **method_kw)
        else:
            raise ValueError(f"unknown training method {method!r}")
        return det, state

    def recipes(self) -> dict[str, tuple[RecipeConfig, str]]:
        """The three recipes compared in the recipe-ordering experiment."""
        r = self.cfg.recipe
        return {
            "STD": (replace(r, backbone_init="upstream_benign", backbone_lr_multiplier=1.0), "standard"),
            "BeniAT": (replace(r, backbone_init="upstream_benign", backbone_lr_multiplier=1.0), "free"),
            "AdvAT": (replace(r, backbone_init="upstream_adversarial", backbone_lr_multiplier=0.1), "free"),
        }


def pipeline_config_from_dict(d: dict) -> ToyPipelineConfig:
    base = ToyPipelineConfig()
    kw = {}
    for name in ("upstream", "train", "test"):
        if name in d:
            kw[name] = replace(getattr(base, name), **d[name])
    if "detector" in d:
        kw["detector"] = replace(base.detector, **d["detector"])
    if "pretrain" in d:
        p = dict(d["pretrain"])
        if "attack_alpha_fraction" in p:
            from fractions import Fraction
            p["attack_alpha_fraction"] = Fraction(str(p["attack_alpha_fraction"]))
        kw["pretrain"] = replace(base.pretrain, **p)
    if "pretrain_epsilon" in d:
        kw["pretrain_epsilon"] = int(d["pretrain_epsilon"])
    if "recipe" in d:
        kw["recipe"] = RecipeConfig.from_dict(base.recipe.to_dict() | d["recipe"])
    return ToyPipelineConfig(**kw)


__all__ = ["ToyPipelineConfig", "ToyWorkbench", "pipeline_config_from_dict"]
