"""Per-voxel vote across the three plane segmentations.

Each plane's probability maps are binarized at ``tau``, put back into voxel
space, and a voxel is kept when at least ``vote_threshold`` planes mark it.
With the default threshold of 3 this is the exact three-way intersection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import Plane, PlaneStack, reassemble


@dataclass
class PlanePrediction:
    plane: Plane
    probs: np.ndarray  # (n_slices, a, b), values in [0, 1]
    tau: float = 0.5


@dataclass(frozen=True)
class AggregationRule:
    vote_threshold: int = 3

    def __post_init__(self):
        if self.vote_threshold not in (1, 2, 3):
            raise ValueError(f"vote_threshold must be 1, 2 or 3, got {self.vote_threshold}")


def binarize(pred: PlanePrediction) -> PlaneStack:
    """1 where ``p >= tau``."""
    return PlaneStack(pred.plane, (np.asarray(pred.probs) >= pred.tau).astype(np.uint8))


def _as_stack(p) -> PlaneStack:
    return binarize(p) if isinstance(p, PlanePrediction) else p


def per_plane_mask(pred, dims) -> np.ndarray:
    """Single-plane 3D mask, the no-aggregation baseline."""
    return reassemble(_as_stack(pred), dims).astype(np.uint8)


def aggregate_planes(ax, sag, cor, dims, rule: AggregationRule = AggregationRule()) -> np.ndarray:
    """Voxel is 1 iff the number of planes voting for it reaches ``rule.vote_threshold``.

    Arguments are binarized :class:`PlaneStack` objects or raw
    :class:`PlanePrediction` objects (binarized here).
    """
    votes = np.zeros(tuple(dims), dtype=np.uint8)
    for p in (ax, sag, cor):
        votes += per_plane_mask(p, dims)
    return (votes >= rule.vote_threshold).astype(np.uint8)
