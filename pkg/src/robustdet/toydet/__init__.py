"""Desk-scale substrate: synthetic shapes data, a tiny anchor-free detector and backbone pre-training."""

from .data import CLASS_NAMES, SUPERCATEGORIES, ShapesDataset, ShapesDatasetSpec, crop_objects, generate_shapes_dataset
from .model import (ToyDetector, ToyDetectorConfig, backbone_param_count, build_toy_detector, head_param_count,
                    reallocation_variants)
from .pipeline import ToyPipelineConfig, ToyWorkbench, pipeline_config_from_dict
from .pretrain import PretrainConfig, classification_accuracy, pretrain_toy_backbone

__all__ = [
    "CLASS_NAMES", "SUPERCATEGORIES", "PretrainConfig", "ShapesDataset", "ShapesDatasetSpec", "ToyDetector",
    "ToyDetectorConfig", "ToyPipelineConfig", "ToyWorkbench", "backbone_param_count", "build_toy_detector",
    "classification_accuracy", "crop_objects", "generate_shapes_dataset", "head_param_count",
    "pipeline_config_from_dict", "pretrain_toy_backbone", "reallocation_variants",
]
