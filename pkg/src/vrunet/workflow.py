"""Glue for training one plane's classifier and segmenter from volumes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data_io import balance_for_classification, extract_slices
from .models import ArchSpec, build
from .pipeline import PlaneModelPair, pad_slices
from .training import FitResult, fit
from .volume import Plane, Volume, normalize_volume, plane_slice_shape, slice_array

# default learning rates and batch size
CLASSIFIER_LR = 1e-5
SEGMENTER_LR = 1e-3
BATCH_SIZE = 16


@dataclass
class PlaneData:
    x: np.ndarray          # (n, a, b) float32 normalized slices
    masks: np.ndarray      # (n, a, b) uint8
    has_lesion: np.ndarray  # (n,) bool
    case_ids: np.ndarray


def plane_data(cases: Sequence[tuple[str, Volume]], plane: Plane, normalize: bool = True) -> PlaneData:
    xs, ms, ids = [], [], []
    for case_id, v in cases:
        if normalize:
            v = normalize_volume(v)
        xs.append(slice_array(v.intensities, plane).slices)
        ms.append(slice_array(v.mask, plane).slices)
        ids += [case_id] * xs[-1].shape[0]
    x = np.concatenate(xs).astype(np.float32)
    m = np.concatenate(ms).astype(np.uint8)
    return PlaneData(x, m, m.reshape(len(m), -1).any(axis=1), np.array(ids, dtype=object))


def balanced_indices(data: PlaneData, seed: int = 0) -> np.ndarray:
    """Indices of a lesion/normal balanced subset (majority class undersampled)."""
    from .data_io import SliceDataset

    ds = SliceDataset(data.case_ids, np.full(len(data.has_lesion), "", dtype=object),
                      np.arange(len(data.has_lesion)), data.has_lesion)
    return balance_for_classification(ds, seed).slice_index


def toy_specs(volume_dims, plane: Plane, cls_channels=(8, 16), seg_channels=(8, 16), **seg_kw):
    hw = plane_slice_shape(volume_dims, plane)
    return (ArchSpec.classifier(hw, cls_channels, dense_units=32),
            ArchSpec.segmenter(hw, seg_channels, **seg_kw))


@dataclass
class PlaneTraining:
    pair: PlaneModelPair
    classifier_fit: FitResult
    segmenter_fit: FitResult


def train_classifier(spec: ArchSpec, train: PlaneData, val: Optional[PlaneData] = None, *, lr: float = CLASSIFIER_LR,
                     epochs: int = 10, batch_size: int = BATCH_SIZE, patience: int = 10, seed: int = 0,
                     dtype=np.float32, balance: bool = True) -> FitResult:
    idx = balanced_indices(train, seed) if balance else np.arange(len(train.x))
    x = pad_slices(train.x[idx], spec.input_hw).astype(dtype)
    y = train.has_lesion[idx].astype(dtype)[:, None]
    xv = yv = None
    if val is not None and len(val.x):
        xv = pad_slices(val.x, spec.input_hw).astype(dtype)
        yv = val.has_lesion.astype(dtype)[:, None]
    model = build(spec, seed, dtype)
    return fit(model, x, y, lr=lr, epochs=epochs, batch_size=batch_size, x_val=xv, y_val=yv,
               patience=patience, seed=seed)


def train_segmenter(spec: ArchSpec, train: PlaneData, val: Optional[PlaneData] = None, *, lr: float = SEGMENTER_LR,
                    epochs: int = 10, batch_size: int = BATCH_SIZE, patience: int = 10, seed: int = 0,
                    dtype=np.float32) -> FitResult:
    idx = np.flatnonzero(train.has_lesion)
    x = pad_slices(train.x[idx], spec.input_hw).astype(dtype)
    y = pad_slices(train.masks[idx].astype(np.float32), spec.input_hw).astype(dtype)
    xv = yv = None
    if val is not None and val.has_lesion.any():
        vi = np.flatnonzero(val.has_lesion)
        xv = pad_slices(val.x[vi], spec.input_hw).astype(dtype)
        yv = pad_slices(val.masks[vi].astype(np.float32), spec.input_hw).astype(dtype)
    model = build(spec, seed, dtype)
    return fit(model, x, y, lr=lr, epochs=epochs, batch_size=batch_size, x_val=xv, y_val=yv,
               patience=patience, seed=seed)


def train_plane(plane: Plane, train_cases, val_cases=None, *, cls_spec: ArchSpec, seg_spec: ArchSpec,
                cls_lr: float = CLASSIFIER_LR, seg_lr: float = SEGMENTER_LR, cls_epochs: int = 10,
                seg_epochs: int = 10, batch_size: int = BATCH_SIZE, patience: int = 10, seed: int = 0,
                dtype=np.float32) -> PlaneTraining:
    train = plane_data(train_cases, plane)
    val = plane_data(val_cases, plane) if val_cases else None
    cf = train_classifier(cls_spec, train, val, lr=cls_lr, epochs=cls_epochs, batch_size=batch_size,
                          patience=patience, seed=seed, dtype=dtype)
    sf = train_segmenter(seg_spec, train, val, lr=seg_lr, epochs=seg_epochs, batch_size=batch_size,
                         patience=patience, seed=seed, dtype=dtype)
    return PlaneTraining(PlaneModelPair(plane, cf.model, sf.model), cf, sf)


def slice_tallies(cases, plane: Plane) -> dict[str, int]:
    return extract_slices(cases, plane).tallies()
