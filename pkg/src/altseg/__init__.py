"""Altering-resolution video semantic segmentation at desk scale.

The package pairs a toy block-motion video codec with a two-branch
segmentation network: keyframes run at full resolution, the frames in
between run at a reduced resolution and are lifted back by warping the
keyframe's features along the codec's motion vectors and aggregating
them with local attention. Training distills the full-resolution
branch's features into the fused reduced branch.
"""

from .backbone import Backbone, BackboneConfig
from .codec import (ClipFormatError, EncodedClip, MotionField, decode_clip,
                    encode_clip, estimate_motion, load_clip, save_clip)
from .evaluate import (CostReport, EvalClip, RatePoint, amortized_cost,
                       bd_metrics, frame_costs, gop_schedule, miou_by_distance,
                       run_sequence)
from .fusion import Fusion, FusionConfig
from .tensor import (FileFormatError, ShapeError, Tensor, grad_check,
                     load_labels, load_tensor, save_labels, save_tensor)
from .training import (TrainConfig, TrainingDiverged, TrainPair,
                       train_hr_branch, train_lr_branch)

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "ClipFormatError", "CostReport",
    "EncodedClip", "EvalClip", "FileFormatError", "Fusion", "FusionConfig",
    "MotionField", "RatePoint", "ShapeError", "Tensor", "TrainConfig",
    "TrainPair", "TrainingDiverged", "amortized_cost", "bd_metrics",
    "decode_clip", "encode_clip", "estimate_motion", "frame_costs",
    "gop_schedule", "grad_check", "load_clip", "load_labels", "load_tensor",
    "miou_by_distance", "run_sequence", "save_clip", "save_labels",
    "save_tensor", "train_hr_branch", "train_lr_branch",
]
