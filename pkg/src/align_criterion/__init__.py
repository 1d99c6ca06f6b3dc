"""Quality-aware set-prediction criterion for detection-style matching."""

from .criterion import (
    ALL_VARIANTS,
    CriterionConfig,
    LossReport,
    Variant,
    classification_loss,
    comparison_loss,
    ia_bce_loss,
    prime_weights,
    quality,
    quality_targets,
    regression_loss,
    total_loss,
)
from .diagnostics import AlignmentReport, alignment_report, br_recall, density_map, pearson
from .geometry import Box, giou, iou
from .matching import (
    Assignment,
    CostParams,
    InfeasibleReplication,
    brute_force_match,
    cost_matrix,
    hungarian,
    match_many_to_one,
    match_one_to_one,
)
from .structures import GroundTruth, PredictionSet, Scene
from .toytrain import SceneSpec, TrainConfig, compare_variants, generate_scene, train, train_scene

__all__ = [
    "ALL_VARIANTS", "AlignmentReport", "Assignment", "Box", "CostParams", "CriterionConfig",
    "GroundTruth", "InfeasibleReplication", "LossReport", "PredictionSet", "Scene", "SceneSpec",
    "TrainConfig", "Variant", "alignment_report", "br_recall", "brute_force_match",
    "classification_loss", "compare_variants", "comparison_loss", "cost_matrix", "density_map",
    "generate_scene", "giou", "hungarian", "ia_bce_loss", "iou", "match_many_to_one",
    "match_one_to_one", "pearson", "prime_weights", "quality", "quality_targets",
    "regression_loss", "total_loss", "train", "train_scene",
]
