"""Classify-then-segment per plane, then vote across planes.

Each plane has a classifier and a segmenter. A slice reaches the segmenter only
when the classifier probability is at least ``gate``; otherwise its map is all
zeros. Slices are zero-padded at the bottom/right to the model input size and
predictions are cropped back before anything is put into voxel space.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .aggregation import AggregationRule, PlanePrediction, aggregate_planes, binarize, per_plane_mask
from .models import ModelParams, forward
from .volume import PLANES, Plane, PlaneStack, Volume, normalize_volume, slice_volume


@dataclass
class PlaneModelPair:
    plane: Plane
    classifier: ModelParams
    segmenter: ModelParams

    def __post_init__(self):
        if self.classifier.spec.kind != "classifier" or self.segmenter.spec.kind != "segmenter":
            raise ValueError("PlaneModelPair needs a classifier and a segmenter")


def pad_slices(slices: np.ndarray, input_hw) -> np.ndarray:
    """(n, a, b) slices -> (n, H, W, 1) zero-padded model input."""
    n, a, b = slices.shape
    H, W = input_hw
    if a > H or b > W:
        raise ValueError(f"slice {a}x{b} is larger than model input {H}x{W}")
    out = np.zeros((n, H, W, 1), dtype=np.float32)
    out[:, :a, :b, 0] = slices
    return out


def process_slice(pair: PlaneModelPair, slice2d: np.ndarray, gate: float = 0.5) -> tuple[float, np.ndarray]:
    """Returns ``(classifier probability, segmentation probability map)``."""
    slice2d = np.asarray(slice2d)
    if slice2d.ndim != 2:
        raise ValueError(f"expected a 2-d slice, got shape {slice2d.shape}")
    x = pad_slices(slice2d[None], pair.classifier.spec.input_hw)
    p = float(forward(pair.classifier, x.astype(pair.classifier.dtype))[0, 0])
    if p < gate:
        return p, np.zeros(slice2d.shape, dtype=np.float32)
    xs = pad_slices(slice2d[None], pair.segmenter.spec.input_hw)
    seg = forward(pair.segmenter, xs.astype(pair.segmenter.dtype))[0, :, :, 0]
    return p, seg[: slice2d.shape[0], : slice2d.shape[1]].astype(np.float32)


def act_as_classification(pair: PlaneModelPair, slice2d: np.ndarray, gate: float = 0.5, tau: float = 0.5,
                          min_pixels: int = 1) -> bool:
    """Slice label from the combined model: lesion iff the gate opens and the
    binarized segmentation has at least ``min_pixels`` positives."""
    p, seg = process_slice(pair, slice2d, gate)
    return combined_label(p, seg, gate, tau, min_pixels)


def combined_label(cls_prob: float, seg_map: np.ndarray, gate: float = 0.5, tau: float = 0.5,
                   min_pixels: int = 1) -> bool:
    return bool(cls_prob >= gate and np.count_nonzero(np.asarray(seg_map) >= tau) >= min_pixels)


@dataclass
class PlaneOutput:
    plane: Plane
    cls_probs: np.ndarray        # (n_slices,)
    probs: np.ndarray            # (n_slices, a, b)
    gate_open: np.ndarray        # (n_slices,) bool
    combined: np.ndarray         # (n_slices,) bool
    segmenter_calls: int
    seconds: float


@dataclass
class PipelineResult:
    dims: tuple[int, int, int]
    planes: dict[str, PlaneOutput]
    per_plane_masks: dict[str, np.ndarray]
    mask: Optional[np.ndarray]
    rule: AggregationRule
    stats: dict = field(default_factory=dict)

    def report(self) -> dict:
        return {
            "dims": list(self.dims),
            "vote_threshold": self.rule.vote_threshold,
            "aggregated": self.mask is not None,
            "aggregated_voxels": None if self.mask is None else int(self.mask.sum()),
            "planes": {
                name: {
                    "slices": int(len(po.cls_probs)),
                    "gate_open": int(po.gate_open.sum()),
                    "segmenter_calls": po.segmenter_calls,
                    "combined_positive": int(po.combined.sum()),
                    "mask_voxels": int(self.per_plane_masks[name].sum()),
                    "seconds": round(po.seconds, 4),
                }
                for name, po in self.planes.items()
            },
            **self.stats,
        }


def _run_chunk(pair: PlaneModelPair, chunk: np.ndarray, gate: float):
    xc = pad_slices(chunk, pair.classifier.spec.input_hw).astype(pair.classifier.dtype)
    cls = forward(pair.classifier, xc)[:, 0].astype(np.float64)
    open_ = cls >= gate
    probs = np.zeros(chunk.shape, dtype=np.float32)
    if open_.any():
        xs = pad_slices(chunk[open_], pair.segmenter.spec.input_hw).astype(pair.segmenter.dtype)
        seg = forward(pair.segmenter, xs)[:, : chunk.shape[1], : chunk.shape[2], 0]
        probs[open_] = seg
    return cls, probs, open_


def run_plane(pair: PlaneModelPair, stack: PlaneStack, gate: float = 0.5, tau: float = 0.5, min_pixels: int = 1,
              batch_size: int = 32, threads: int = 1) -> PlaneOutput:
    t0 = time.perf_counter()
    slices = stack.slices.astype(np.float32)
    chunks = [slices[s:s + batch_size] for s in range(0, len(slices), batch_size)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            outs = list(ex.map(lambda c: _run_chunk(pair, c, gate), chunks))
    else:
        outs = [_run_chunk(pair, c, gate) for c in chunks]
    cls = np.concatenate([o[0] for o in outs])
    probs = np.concatenate([o[1] for o in outs])
    open_ = np.concatenate([o[2] for o in outs])
    combined = open_ & ((probs >= tau).sum(axis=(1, 2)) >= min_pixels)
    return PlaneOutput(stack.plane, cls, probs, open_, combined, int(open_.sum()), time.perf_counter() - t0)


def process_volume(pairs: Sequence[PlaneModelPair], v: Volume, rule: AggregationRule = AggregationRule(),
                   *, gate: float = 0.5, tau: float = 0.5, min_pixels: int = 1, aggregate: bool = True,
                   normalize: bool = True, batch_size: int = 32, threads: int = 1) -> PipelineResult:
    by_plane = {p.plane: p for p in pairs}
    if sorted(by_plane) != sorted(PLANES) or len(pairs) != 3:
        raise ValueError(f"need exactly one model pair per plane, got {[p.plane for p in pairs]}")
    if normalize:
        v = normalize_volume(v)
    outs, masks = {}, {}
    for plane in PLANES:
        po = run_plane(by_plane[plane], slice_volume(v, plane), gate, tau, min_pixels, batch_size, threads)
        outs[plane] = po
        masks[plane] = per_plane_mask(PlanePrediction(plane, po.probs, tau), v.dims)
    mask = None
    if aggregate:
        stacks = [binarize(PlanePrediction(p, outs[p].probs, tau)) for p in PLANES]
        mask = aggregate_planes(*stacks, v.dims, rule)
    return PipelineResult(v.dims, outs, masks, mask, rule,
                          {"gate": gate, "tau": tau, "min_pixels": min_pixels})


def write_run_report(result: PipelineResult, path) -> None:
    Path(path).write_text(json.dumps(result.report(), indent=2) + "\n")
