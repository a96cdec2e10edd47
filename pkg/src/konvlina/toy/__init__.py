"""Desk-scale detection benchmark used for the neck ablation."""

from konvlina.toy.metrics import APResult, Detection, evaluate_ap
from konvlina.toy.scene import SIZE_BANDS, Box, SyntheticScene, generate_scene, make_dataset

__all__ = ["APResult", "Box", "Detection", "SIZE_BANDS", "SyntheticScene", "evaluate_ap", "generate_scene",
           "make_dataset"]
