"""Saliency segmentation as referring-expression generation, with confidence-guided RL on a toy policy."""

__version__ = "0.1.0"

from .raster import BinaryMask, GrayMask, PGMError, binarize, iou, load_mask, save_mask, union  # noqa: E402
from .metrics import (  # noqa: E402
    average_precision,
    e_measure,
    evaluate_map,
    f_measure_max,
    hungarian_max,
    mae,
    s_measure,
)
from .interface import FormatError, ReferringExpression, TaskKind, format_reward, parse_response  # noqa: E402
from .reward import InstanceSet, correctness_cosod, correctness_sod, iasm, total_reward  # noqa: E402
from .policy import TabularPolicy, Vocabulary, load_policy, save_policy  # noqa: E402
from .environment import World, WorldConfig, build_world, score_response  # noqa: E402
from .optimize import TrainerConfig, TrainingReport, categorize_responses, train  # noqa: E402

__all__ = [
    "BinaryMask",
    "GrayMask",
    "PGMError",
    "binarize",
    "iou",
    "load_mask",
    "save_mask",
    "union",
    "average_precision",
    "e_measure",
    "evaluate_map",
    "f_measure_max",
    "hungarian_max",
    "mae",
    "s_measure",
    "FormatError",
    "ReferringExpression",
    "TaskKind",
    "format_reward",
    "parse_response",
    "InstanceSet",
    "correctness_cosod",
    "correctness_sod",
    "iasm",
    "total_reward",
    "TabularPolicy",
    "Vocabulary",
    "load_policy",
    "save_policy",
    "World",
    "WorldConfig",
    "build_world",
    "score_response",
    "TrainerConfig",
    "TrainingReport",
    "categorize_responses",
    "train",
]
