"""YAML run configs: one dialect for every command, selected by a ``kind:`` field."""

from __future__ import annotations

import hashlib
import json
from fractions import Fraction
from pathlib import Path
from typing import Annotated, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, TypeAdapter, ValidationError, field_validator

from .attacks import AttackSpec
from .objectives import ObjectiveKind
from .training import BACKBONE_INITS, OPTIMIZERS


class ConfigFileError(ValueError):
    """Config could not be read or failed validation; the message lists field paths."""


class Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


OBJECTIVES = tuple(k.value for k in ObjectiveKind)
Objective = Literal["cls", "reg", "vanilla", "cwa", "mtd"]


class AttackCfg(Strict):
    objective: Objective = "cls"
    epsilon: int = Field(8, ge=0, le=255)
    alpha_fraction: float = Field(0.25, gt=0)
    steps: int = Field(20, ge=1)
    random_start: bool = False

    def to_spec(self, seed: int) -> AttackSpec:
        frac = Fraction(str(self.alpha_fraction)).limit_denominator(10_000)
        return AttackSpec.make(self.objective, self.epsilon, frac, self.steps, self.random_start, seed)


class DataSpecCfg(Strict):
    n_images: int = Field(96, ge=0)
    image_size: int = 64
    num_classes: int = 3
    objects_per_image: tuple[int, int] = (1, 6)
    size_range: tuple[int, int] = (8, 60)
    noise: float = 0.04
    contrast: tuple[float, float] = (0.15, 0.4)
    crop_size: int = 32
    crop_margin: tuple[float, float] = (0.2, 0.2)


class DetectorCfg(Strict):
    backbone_blocks: int = 4
    backbone_width: int = 48
    head_layers: int = 2
    head_width: int = 32
    num_classes: int = 3
    head_kernel: Literal[1, 3] = 3
    image_size: int = 64
    score_threshold: float = 0.05
    nms_iou: float = 0.6
    max_detections: int = 100


class PretrainCfg(Strict):
    epochs: int = 15
    lr: float = 2e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    attack_steps: int = 3
    attack_alpha_fraction: float = 0.5
    random_start: bool = True
    eps_warmup_epochs: int = 5


class RecipeCfg(Strict):
    replay_m: int = Field(4, ge=1)
    epochs_equivalent: int = Field(160, ge=1)
    base_lr: float = Field(5e-3, gt=0)
    backbone_lr_multiplier: float = Field(0.1, ge=0, le=1)
    weight_decay: float = Field(1e-4, ge=0)
    optimizer: Literal["adaptive_decoupled_wd", "momentum_sgd"] = "adaptive_decoupled_wd"
    lr_milestones: list[int] = [106, 133]
    lr_decay: float = 0.1
    epsilon: int = Field(8, ge=0, le=255)
    objective: Objective = "vanilla"
    backbone_init: Literal["upstream_adversarial", "upstream_benign", "downstream_benign", "random"] = \
        "upstream_adversarial"
    batch_size: int = Field(32, ge=1)

    def to_recipe(self):
        from .core import AttackBudget
        from .training import RecipeConfig
        d = self.model_dump()
        eps = d.pop("epsilon")
        return RecipeConfig(**d, budget=AttackBudget(eps))


class BackboneCfg(Strict):
    init: Literal["upstream_adversarial", "upstream_benign", "downstream_benign", "random"] = "upstream_adversarial"
    checkpoint: Optional[str] = None


# ----------------------------------------------------------------- commands

class Base(Strict):
    seed: int
    workers: int = Field(1, ge=1)


class DatasetRun(Base):
    kind: Literal["dataset"]
    spec: DataSpecCfg = DataSpecCfg()


class PretrainRun(Base):
    kind: Literal["pretrain"]
    data: str                                   # dataset directory (classification crops derived from it)
    mode: Literal["benign", "adversarial"] = "adversarial"
    epsilon: int = Field(8, ge=0, le=255)
    crop_size: int = 48
    crop_margin: tuple[float, float] = (0.1, 1.2)
    detector: DetectorCfg = DetectorCfg()
    pretrain: PretrainCfg = PretrainCfg()


class TrainRun(Base):
    kind: Literal["train-at"]
    data: str
    method: Literal["free", "pgd", "standard"] = "free"
    inner_steps: int = Field(10, ge=0)
    inner_alpha: float = Field(2.0, gt=0)
    detector: DetectorCfg = DetectorCfg()
    backbone: BackboneCfg = BackboneCfg()
    recipe: RecipeCfg = RecipeCfg()

    @field_validator("recipe")
    @classmethod
    def _divisible(cls, v: RecipeCfg):
        if v.epochs_equivalent % v.replay_m:
            raise ValueError("epochs_equivalent must be a multiple of replay_m")
        return v


class AttackRun(Base):
    kind: Literal["attack"]
    model: str
    data: str
    attack: AttackCfg = AttackCfg()


class EvalRun(Base):
    kind: Literal["eval"]
    model: Optional[str] = None                 # evaluate a detector on ``data`` ...
    data: Optional[str] = None
    detections: Optional[str] = None            # ... or score a record file against ``ground_truth``
    ground_truth: Optional[str] = None
    num_classes: Optional[int] = None
    area_bands: tuple[float, float] = (256.0, 2304.0)
    interpolation: Literal["101", "11"] = "101"
    similarity: Optional[dict[int, str]] = None
    attack: Optional[AttackCfg] = None


class TransferRun(Base):
    kind: Literal["transfer"]
    models: dict[str, str]
    data: str
    attack: AttackCfg = AttackCfg()


class DataPatch(Strict):
    n_images: Optional[int] = None
    image_size: Optional[int] = None
    num_classes: Optional[int] = None
    objects_per_image: Optional[tuple[int, int]] = None
    size_range: Optional[tuple[int, int]] = None
    noise: Optional[float] = None
    contrast: Optional[tuple[float, float]] = None
    crop_size: Optional[int] = None
    crop_margin: Optional[tuple[float, float]] = None
    seed: Optional[int] = None


class PipelineCfg(Strict):
    """Partial overrides of the toy pipeline defaults; omitted fields keep their default."""

    upstream: Optional[DataPatch] = None
    train: Optional[DataPatch] = None
    test: Optional[DataPatch] = None
    detector: Optional[dict[Literal[tuple(DetectorCfg.model_fields)], object]] = None
    pretrain: Optional[dict[Literal[tuple(PretrainCfg.model_fields)], object]] = None
    pretrain_epsilon: Optional[int] = None
    recipe: Optional[dict[Literal[tuple(RecipeCfg.model_fields) + ("budget",)], object]] = None

    def to_dict(self) -> dict:
        return self.model_dump(exclude_none=True)


class AblateRun(Base):
    kind: Literal["ablate"]
    seeds: list[int] = [0, 1, 2]
    pipeline: PipelineCfg = PipelineCfg()
    axes: dict[Literal["backbone_init", "optimizer", "backbone_lr_multiplier", "schedule"], list]
    attack: AttackCfg = AttackCfg()
    objectives: list[Objective] = ["cls"]
    cache_dir: Optional[str] = None


class ReportRun(Base):
    kind: Literal["report"]
    runs: list[str]


RunConfig = Annotated[Union[DatasetRun, PretrainRun, TrainRun, AttackRun, EvalRun, TransferRun, AblateRun,
                            ReportRun], Field(discriminator="kind")]
_ADAPTER = TypeAdapter(RunConfig)

COMMAND_KINDS = {"make-data": "dataset", "pretrain": "pretrain", "train-at": "train-at", "attack": "attack",
                 "eval": "eval", "transfer": "transfer", "ablate": "ablate", "report": "report"}


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{loc}: {e['msg']}")
    return "; ".join(lines)


def validate_config(data: dict):
    try:
        return _ADAPTER.validate_python(data)
    except ValidationError as exc:
        raise ConfigFileError(_format_errors(exc)) from None


def load_config(path: str | Path | None, overrides: dict | None = None, kind: str | None = None):
    """Read YAML, merge dotted-path ``overrides`` and validate; ``kind`` fills a missing discriminator."""
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigFileError(f"cannot read config {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigFileError(f"{path}: top level must be a mapping")
    if kind is not None:
        data.setdefault("kind", kind)
        if data["kind"] != kind:
            raise ConfigFileError(f"kind: config is {data['kind']!r} but the command expects {kind!r}")
    for dotted, value in (overrides or {}).items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return validate_config(data)


def canonical(cfg) -> dict:
    return json.loads(cfg.model_dump_json())


def config_hash(cfg) -> str:
    """sha256 of the canonical JSON of the validated config, seed and worker count excluded."""
    d = canonical(cfg)
    d.pop("seed", None)
    d.pop("workers", None)  # results do not depend on the worker count
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


__all__ = ["AblateRun", "AttackCfg", "AttackRun", "COMMAND_KINDS", "ConfigFileError", "DatasetRun", "EvalRun",
           "OBJECTIVES", "PretrainRun", "ReportRun", "TrainRun", "TransferRun", "canonical", "config_hash",
           "load_config", "validate_config", "BACKBONE_INITS", "OPTIMIZERS"]
