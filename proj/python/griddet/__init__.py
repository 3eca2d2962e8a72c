"""Grid-based lidar 3D object detection toolkit."""

from ._core import (
    ConfigError,
    Error,
    FormatError,
    InvariantError,
    Model,
    ValidationError,
    canonical_points,
    evaluate,
    gradcheck,
    iou_3d,
    iou_bev,
    load_points,
    preset_config,
    run_cli,
    save_points,
    scaling_series,
    toy_fit,
    toy_points,
)

__all__ = [
    "ConfigError",
    "Error",
    "FormatError",
    "InvariantError",
    "Model",
    "ValidationError",
    "canonical_points",
    "evaluate",
    "gradcheck",
    "iou_3d",
    "iou_bev",
    "load_points",
    "preset_config",
    "run_cli",
    "save_points",
    "scaling_series",
    "toy_fit",
    "toy_points",
]
