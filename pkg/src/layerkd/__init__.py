"""Layer-selection experiments for intermediate-layer knowledge distillation."""

from .distill import DistillConfig, LayerMapping, ProjectionSet, distill, hidden_match_loss, kl_loss, select_layers, total_distill_loss
from .geometry import AngleReport, build_angle_report, pairwise_angle_cosines
from .models import ModelSpec, TransformerModel, build_model, init_student_from_teacher
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = [
    "AngleReport",
    "DistillConfig",
    "LayerMapping",
    "ModelSpec",
    "ProjectionSet",
    "Tape",
    "Tensor",
    "TransformerModel",
    "build_angle_report",
    "build_model",
    "distill",
    "hidden_match_loss",
    "init_student_from_teacher",
    "kl_loss",
    "pairwise_angle_cosines",
    "select_layers",
    "total_distill_loss",
]
