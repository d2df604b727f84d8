"""Adversarial attacks, adversarial fine-tuning and robustness evaluation for object detectors."""

from .attacks import AttackError, AttackSpec, EmptyTargetWarning, attack_batch, pgd_attack
from .core import (AttackBudget, ContractError, DetectionSet, DetectorHandle, GroundTruthSet, PerInstanceLosses,
                   Perturbation, PixelImage, Sample, apply_perturbation, project_to_budget)
from .objectives import ObjectiveKind, cwa_weights, objective_value
from .training import (RecipeConfig, TrainState, build_param_groups, free_at_train, load_backbone_checkpoint,
                       pgd_at_train, standard_train)

__version__ = "0.1.0"

__all__ = [
    "AttackBudget", "AttackError", "AttackSpec", "ContractError", "DetectionSet", "DetectorHandle",
    "EmptyTargetWarning", "GroundTruthSet", "ObjectiveKind", "PerInstanceLosses", "Perturbation", "PixelImage",
    "RecipeConfig", "Sample", "TrainState", "apply_perturbation", "attack_batch", "build_param_groups",
    "cwa_weights", "free_at_train", "load_backbone_checkpoint", "objective_value", "pgd_at_train", "pgd_attack",
    "project_to_budget", "standard_train", "__version__",
]
