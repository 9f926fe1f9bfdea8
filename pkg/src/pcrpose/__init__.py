"""Progressive context refinement (PCR) for top-down human keypoint detection.

A numpy-only tensor engine with reverse-mode gradients carries the
context-aware module and the multi-level decoder; the rest of the package
covers heatmap coding, OKS evaluation and the data-side training strategies.
"""
from .cam import Cam, CamConfig, cam_forward
from .model import PcrConfig, PcrModel, multi_task_loss, pcr_forward, train_step

__all__ = [
    "Cam",
    "CamConfig",
    "PcrConfig",
    "PcrModel",
    "cam_forward",
    "multi_task_loss",
    "pcr_forward",
    "train_step",
]
__version__ = "0.1.0"
