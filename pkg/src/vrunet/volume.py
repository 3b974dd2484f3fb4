"""3D volumes and their axial / sagittal / coronal slice stacks.

Axis convention: array index ``(x, y, z)`` with x = left-right,
y = anterior-posterior, z = superior-inferior.

======== ============ ============ ===========
plane    enumerates   slice dims   slice k
======== ============ ============ ===========
axial    z            X x Y        ``v[:, :, k]``
sagittal x            Y x Z        ``v[k, :, :]``
coronal  y            X x Z        ``v[:, k, :]``
======== ============ ============ ===========

Volumes stored in another orientation can pass their own ``axes`` mapping
(plane -> enumerated array axis) to the slicing functions.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Optional

import numpy as np

Plane = Literal["axial", "sagittal", "coronal"]
PLANES: tuple[Plane, ...] = ("axial", "sagittal", "coronal")
PLANE_AXIS = {"axial": 2, "sagittal": 0, "coronal": 1}


@dataclass
class Volume:
    intensities: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.intensities.ndim != 3:
            raise ValueError(f"volume must be 3-d, got shape {self.intensities.shape}")
        if self.mask is not None:
            if self.mask.shape != self.intensities.shape:
                raise ValueError(f"mask shape {self.mask.shape} != volume shape {self.intensities.shape}")
            if not np.isin(self.mask, (0, 1)).all():
                raise ValueError("mask values must be 0 or 1")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.intensities.shape)


@dataclass
class PlaneStack:
    plane: Plane
    slices: np.ndarray  # (n_slices, a, b)

    @property
    def index_axis(self) -> int:
        return PLANE_AXIS[self.plane]

    def __len__(self) -> int:
        return self.slices.shape[0]


def _axis(plane: Plane, axes) -> int:
    if plane not in axes:
        raise ValueError(f"unknown plane {plane!r}")
    if sorted(axes[p] for p in PLANES) != [0, 1, 2]:
        raise ValueError(f"plane axes must be a permutation of 0, 1, 2, got {dict(axes)}")
    return axes[plane]


def plane_slice_shape(dims, plane: Plane, axes=PLANE_AXIS) -> tuple[int, int]:
    """In-plane shape: the two remaining dims, in array order."""
    axis = _axis(plane, axes)
    a, b = (d for i, d in enumerate(dims) if i != axis)
    return a, b


def slice_array(a: np.ndarray, plane: Plane, axes=PLANE_AXIS) -> PlaneStack:
    return PlaneStack(plane, np.moveaxis(a, _axis(plane, axes), 0).copy())


def slice_volume(v: Volume, plane: Plane, use_mask: bool = False, axes=PLANE_AXIS) -> PlaneStack:
    """Slice the intensities (or the mask, with ``use_mask``) along ``plane``."""
    if use_mask:
        if v.mask is None:
            raise ValueError("volume has no mask")
        return slice_array(v.mask, plane, axes)
    return slice_array(v.intensities, plane, axes)


def reassemble(stack: PlaneStack, dims, axes=PLANE_AXIS) -> np.ndarray:
    """Inverse of :func:`slice_volume`: put slices back at their voxel positions."""
    dims = tuple(dims)
    axis = _axis(stack.plane, axes)
    expected = (dims[axis],) + plane_slice_shape(dims, stack.plane, axes)
    if stack.slices.shape != expected:
        raise ValueError(f"{stack.plane} stack of shape {stack.slices.shape} does not match volume {dims}")
    return np.moveaxis(stack.slices, 0, axis).copy()


def normalize_volume(v: Volume) -> Volume:
    """Min-max scale intensities to [0, 1]; a constant volume maps to zeros."""
    a = np.asarray(v.intensities, dtype=np.float64)
    lo, hi = a.min(), a.max()
    out = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    return Volume(out.astype(np.float32), None if v.mask is None else v.mask.copy())
