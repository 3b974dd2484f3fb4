"""Tri-planar classify-then-segment toolkit for lesion masks in 3D volumes.

numpy implementation of depthwise / separable convolution networks with
hand-written backward passes, a gated per-plane pipeline and a voxelwise
vote across the axial, sagittal and coronal planes.
"""
from .aggregation import AggregationRule, PlanePrediction, aggregate_planes, binarize, per_plane_mask
from .metrics import ConfusionCounts, classification_metrics, confusion, dice, evaluate_volume
from .models import ArchSpec, ModelParams, build, build_classifier, build_segmenter, count_params, forward
from .ops import Kernel, ShapeError, param_count
from .pipeline import PlaneModelPair, PipelineResult, act_as_classification, process_slice, process_volume
from .volume import PLANES, PlaneStack, Volume, normalize_volume, reassemble, slice_volume

__version__ = "0.1.0"

__all__ = [
    "AggregationRule", "ArchSpec", "ConfusionCounts", "Kernel", "ModelParams", "PLANES", "PipelineResult",
    "PlaneModelPair", "PlanePrediction", "PlaneStack", "ShapeError", "Volume", "act_as_classification",
    "aggregate_planes", "binarize", "build", "build_classifier", "build_segmenter", "classification_metrics",
    "confusion", "count_params", "dice", "evaluate_volume", "forward", "normalize_volume", "param_count",
    "per_plane_mask", "process_slice", "process_volume", "reassemble", "slice_volume",
]
