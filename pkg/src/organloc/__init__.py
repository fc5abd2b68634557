"""Bounding-box organ localization with deep Q-learning on 3D volumes."""

from organloc.geometry import Action, Box3, Spacing, apply_action, centroid_distance_mm, iou, wall_distance_mm

__all__ = [
    "Action",
    "Box3",
    "Spacing",
    "apply_action",
    "centroid_distance_mm",
    "iou",
    "wall_distance_mm",
]

__version__ = "0.1.0"
