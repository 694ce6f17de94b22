"""实验数据模型"""
from .lab_models import (
    DESK_MODEL_CONFIG,
    REFERENCE_MODEL_CONFIG,
    ExperimentConfig,
    LayerPattern,
    LayerSpec,
    ModelConfig,
    TrainConfig,
)

__all__ = [
    "DESK_MODEL_CONFIG",
    "REFERENCE_MODEL_CONFIG",
    "ExperimentConfig",
    "LayerPattern",
    "LayerSpec",
    "ModelConfig",
    "TrainConfig",
]
