"""Volume files, synthetic phantoms, and the case / slice data protocol.

Raw format
----------
``write_raw(v, "case")`` writes three files:

* ``case.json``      sidecar: ``{"format": "vrunet-raw", "version": 1,
  "dims": [X, Y, Z], "dtype": "<f4", "order": "C", "endianness": "little",
  "axes": ["x:left-right", "y:anterior-posterior", "z:superior-inferior"],
  "has_mask": bool}``
* ``case.raw``       intensities, C order (z fastest), little-endian
* ``case.mask.raw``  uint8 mask in the same order (only when ``has_mask``)

Manifests
---------
Case manifest: tab-separated ``case_id  volume  mask  split``, one case per
line, ``#`` header. Paths are relative to the manifest's directory.
Slice manifest: tab-separated ``case_id  plane  slice_index  has_lesion``.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy import ndimage

from .volume import PLANE_AXIS, Plane, Volume

AXES = ["x:left-right", "y:anterior-posterior", "z:superior-inferior"]


class FormatError(ValueError):
    pass


class UnsupportedError(FormatError):
    pass


# ---------------------------------------------------------------------------
# NIfTI-1 (read only)
# ---------------------------------------------------------------------------

NIFTI_DTYPES = {2: "u1", 4: "i2", 16: "f4"}


def read_nifti(path) -> Volume:
    """Read a single-file (``n+1``) or paired (``ni1`` .hdr/.img) NIfTI-1 image.

    Supports uint8, int16 and float32 data, either byte order, and gzip
    compression. ``scl_slope``/``scl_inter`` are applied when the slope is
    nonzero. Only the first three dimensions are kept; a fourth must be 1.
    """
    path = Path(path)
    raw = _read_maybe_gz(path)
    if len(raw) < 348:
        raise FormatError(f"{path}: {len(raw)} bytes is shorter than a NIfTI-1 header")
    for end in "<>":
        if struct.unpack_from(end + "i", raw, 0)[0] == 348:
            break
    else:
        raise FormatError(f"{path}: sizeof_hdr at offset 0 is not 348 in either byte order")
    magic = raw[344:348]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise FormatError(f"{path}: bad magic {magic!r} at offset 344")
    dim = struct.unpack_from(end + "8h", raw, 40)
    datatype, bitpix = struct.unpack_from(end + "2h", raw, 70)
    vox_offset, slope, inter = struct.unpack_from(end + "3f", raw, 108)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"{path}: dim[0]={ndim} out of range")
    shape = [max(d, 1) for d in dim[1:1 + ndim]]
    if any(d != 1 for d in shape[3:]):
        raise UnsupportedError(f"{path}: only 3-d images are supported, got dims {shape}")
    shape = (shape + [1, 1, 1])[:3]
    if datatype not in NIFTI_DTYPES:
        raise UnsupportedError(f"{path}: unsupported datatype code {datatype}")
    dt = np.dtype(end + NIFTI_DTYPES[datatype])
    if bitpix != dt.itemsize * 8:
        raise FormatError(f"{path}: bitpix {bitpix} does not match datatype {datatype}")
    if magic == b"n+1\0":
        body = raw[int(vox_offset):]
    else:
        img = _pair_image(path)
        body = _read_maybe_gz(img)[int(vox_offset):]
    n = int(np.prod(shape))
    if len(body) < n * dt.itemsize:
        raise FormatError(f"{path}: expected {n * dt.itemsize} data bytes, found {len(body)}")
    data = np.frombuffer(body, dtype=dt, count=n).reshape(shape, order="F")
    if slope != 0 and np.isfinite(slope) and (slope != 1 or inter != 0):
        data = data.astype(np.float32) * np.float32(slope) + np.float32(inter)
    return Volume(np.ascontiguousarray(data.astype(dt.newbyteorder("="))))


def _read_maybe_gz(path: Path) -> bytes:
    data = path.read_bytes()
    if data[:2] == b"\x1f\x8b":
        return gzip.decompress(data)
    return data


def _pair_image(path: Path) -> Path:
    name = path.name
    for hdr, img in ((".hdr.gz", ".img.gz"), (".hdr", ".img")):
        if name.endswith(hdr):
            return path.with_name(name[: -len(hdr)] + img)
    raise FormatError(f"{path}: 'ni1' header without a .hdr extension")


def read_mask_nifti(path) -> np.ndarray:
    m = read_nifti(path).intensities
    return (m > 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# raw format
# ---------------------------------------------------------------------------

def _stem(path) -> Path:
    p = Path(path)
    return p.with_suffix("") if p.suffix in (".json", ".raw") else p


def write_raw(v: Volume, path) -> None:
    stem = _stem(path)
    a = np.ascontiguousarray(v.intensities)
    dt = a.dtype.newbyteorder("<")
    side = {
        "format": "vrunet-raw",
        "version": 1,
        "dims": list(a.shape),
        "dtype": dt.str,
        "order": "C",
        "endianness": "little",
        "axes": AXES,
        "has_mask": v.mask is not None,
    }
    stem.with_name(stem.name + ".json").write_text(json.dumps(side, indent=2) + "\n")
    stem.with_name(stem.name + ".raw").write_bytes(a.astype(dt).tobytes())
    if v.mask is not None:
        stem.with_name(stem.name + ".mask.raw").write_bytes(np.ascontiguousarray(v.mask, "u1").tobytes())


def read_raw(path) -> Volume:
    stem = _stem(path)
    side = json.loads(stem.with_name(stem.name + ".json").read_text())
    if side.get("format") != "vrunet-raw":
        raise FormatError(f"{stem}.json: not a vrunet-raw sidecar")
    dims = tuple(int(d) for d in side["dims"])
    dt = np.dtype(side["dtype"])
    n = int(np.prod(dims))
    body = stem.with_name(stem.name + ".raw").read_bytes()
    if len(body) != n * dt.itemsize:
        raise FormatError(f"{stem}.raw: {len(body)} bytes, sidecar dims {dims} x {dt} need {n * dt.itemsize}")
    a = np.frombuffer(body, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
    mask = None
    if side.get("has_mask"):
        mb = stem.with_name(stem.name + ".mask.raw").read_bytes()
        if len(mb) != n:
            raise FormatError(f"{stem}.mask.raw: {len(mb)} bytes, expected {n}")
        mask = np.frombuffer(mb, dtype=np.uint8).reshape(dims).copy()
    return Volume(a, mask)


def read_volume(path) -> Volume:
    """Dispatch on extension: NIfTI (.nii, .nii.gz, .hdr) or raw."""
    name = str(path)
    if name.endswith((".nii", ".nii.gz", ".hdr", ".hdr.gz")):
        return read_nifti(path)
    return read_raw(path)


# ---------------------------------------------------------------------------
# synthetic phantoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LesionSpec:
    count: int = 1
    radius_range: tuple[float, float] = (2.0, 5.0)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[int, int, int]
    radii: tuple[float, float, float]


def ellipsoid_mask(dims, lesions: Iterable[Ellipsoid]) -> np.ndarray:
    """Voxels whose integer coordinates satisfy sum(((i - c) / r)^2) <= 1."""
    mask = np.zeros(tuple(dims), dtype=np.uint8)
    for e in lesions:
        lo = [max(int(np.floor(c - r)), 0) for c, r in zip(e.center, e.radii)]
        hi = [min(int(np.ceil(c + r)) + 1, d) for c, r, d in zip(e.center, e.radii, dims)]
        grids = np.ogrid[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, e.center, e.radii))
        mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] |= (q <= 1.0).astype(np.uint8)
    return mask


def place_lesions(rng: np.random.Generator, dims, spec: LesionSpec) -> list[Ellipsoid]:
    r_lo, r_hi = spec.radius_range
    if r_lo <= 0 or r_hi < r_lo:
        raise ValueError(f"bad radius range {spec.radius_range}")
    out = []
    for _ in range(spec.count):
        radii = tuple(float(rng.uniform(r_lo, r_hi)) for _ in range(3))
        for r, d in zip(radii, dims):
            if 2 * int(np.ceil(r)) + 1 > d:
                raise ValueError(f"lesion radius {r:.2f} does not fit an axis of {d} voxels")
        center = tuple(int(rng.integers(int(np.ceil(r)), d - int(np.ceil(r)))) for r, d in zip(radii, dims))
        out.append(Ellipsoid(center, radii))
    return out


def synth_volume(seed: int, dims=(32, 32, 32), lesion_spec: LesionSpec = LesionSpec(),
                 lesions: Optional[Sequence[Ellipsoid]] = None, contrast: float = 0.5,
                 noise: float = 0.02) -> Volume:
    """Smooth random background in roughly [0.1, 0.5] with bright ellipsoidal lesions.

    ``lesions`` overrides random placement. The mask is exact ellipsoid
    membership; lesion voxels get ``contrast`` added to their intensity.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 8:
        raise ValueError(f"every axis needs at least 8 voxels, got {dims}")
    rng = np.random.default_rng(seed)
    if lesions is None:
        lesions = place_lesions(rng, dims, lesion_spec)
    else:
        for e in lesions:
            for c, r, d in zip(e.center, e.radii, dims):
                if c - r < 0 or c + r > d - 1:
                    raise ValueError(f"lesion {e} extends outside volume {dims}")
    bg = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=max(dims) / 8.0, mode="wrap")
    span = np.ptp(bg)
    bg = 0.1 + 0.4 * (bg - bg.min()) / (span if span > 0 else 1.0)
    bg += noise * rng.standard_normal(dims)
    mask = ellipsoid_mask(dims, lesions)
    img = bg + contrast * mask
    return Volume(img.astype(np.float32), mask)


# ---------------------------------------------------------------------------
# case splits and slice datasets
# ---------------------------------------------------------------------------

@dataclass
class CaseRecord:
    case_id: str
    volume_path: str
    mask_path: str = ""
    split: str = ""

    def load(self, root=".") -> Volume:
        v = read_volume(Path(root) / self.volume_path)
        if self.mask_path and self.mask_path != self.volume_path:
            m = read_volume(Path(root) / self.mask_path)
            mask = m.mask if m.mask is not None else (m.intensities > 0).astype(np.uint8)
            if mask.shape != v.dims:
                raise ValueError(f"case {self.case_id}: mask dims {mask.shape} != volume dims {v.dims}")
            v = Volume(v.intensities, mask)
        return v


def split_cases(case_ids: Sequence[str], ratio: float = 0.2, seed: int = 0,
                inner_ratio: Optional[float] = 0.2) -> dict[str, str]:
    """Case-level split: ``round(ratio * n)`` cases to ``test3d``; of the rest,
    ``round(inner_ratio * rest)`` to ``test2d`` and the others to ``train2d``.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    ids = list(case_ids)
    if not ids:
        raise ValueError("cannot split an empty case pool")
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate case ids")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    n3d = int(round(ratio * len(ids)))
    pool = order[n3d:]
    n2d_test = int(round(inner_ratio * len(pool))) if inner_ratio else 0
    out = {c: "test3d" for c in order[:n3d]}
    out.update({c: "test2d" for c in pool[:n2d_test]})
    out.update({c: "train2d" for c in pool[n2d_test:]})
    return out


@dataclass
class SliceDataset:
    case_ids: np.ndarray
    planes: np.ndarray
    slice_index: np.ndarray
    has_lesion: np.ndarray

    def __len__(self) -> int:
        return len(self.has_lesion)

    @property
    def n_lesion(self) -> int:
        return int(np.count_nonzero(self.has_lesion))

    @property
    def n_normal(self) -> int:
        return len(self) - self.n_lesion

    def subset(self, idx) -> "SliceDataset":
        idx = np.asarray(idx)
        return SliceDataset(self.case_ids[idx], self.planes[idx], self.slice_index[idx], self.has_lesion[idx])

    @classmethod
    def concat(cls, parts: Sequence["SliceDataset"]) -> "SliceDataset":
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("case_ids", "planes", "slice_index", "has_lesion")))

    @classmethod
    def empty(cls) -> "SliceDataset":
        return cls(np.array([], dtype=object), np.array([], dtype=object),
                   np.array([], dtype=np.int64), np.array([], dtype=bool))

    def tallies(self) -> dict[str, int]:
        return {"total": len(self), "lesion": self.n_lesion, "normal": self.n_normal}


def lesion_slices(mask: np.ndarray, plane: Plane) -> np.ndarray:
    """Boolean per slice: does the mask slice contain a positive voxel."""
    axes = tuple(a for a in range(3) if a != PLANE_AXIS[plane])
    return np.asarray(mask).any(axis=axes)


def extract_slices(cases: Iterable, plane: Plane) -> SliceDataset:
    """One entry per slice of every case along ``plane``.

    ``cases`` yields ``(case_id, Volume)`` pairs or objects with ``case_id``
    and ``load()`` (e.g. :class:`CaseRecord`). Volumes need a mask.
    """
    parts = []
    for item in cases:
        if isinstance(item, tuple):
            case_id, v = item
        else:
            case_id, v = item.case_id, item.load()
        if v.mask is None:
            raise ValueError(f"case {case_id}: volume has no mask")
        if v.mask.shape != v.dims:
            raise ValueError(f"case {case_id}: mask dims {v.mask.shape} != volume dims {v.dims}")
        flags = lesion_slices(v.mask, plane)
        n = len(flags)
        parts.append(SliceDataset(np.full(n, case_id, dtype=object), np.full(n, plane, dtype=object),
                                  np.arange(n, dtype=np.int64), flags.astype(bool)))
    return SliceDataset.concat(parts)


def balance_for_classification(ds: SliceDataset, seed: int = 0) -> SliceDataset:
    """Undersample the majority class to the minority count, keeping original order."""
    les = np.flatnonzero(ds.has_lesion)
    nor = np.flatnonzero(~ds.has_lesion)
    if len(les) == 0 or len(nor) == 0:
        raise ValueError(f"cannot balance: {len(les)} lesion and {len(nor)} normal slices")
    rng = np.random.default_rng(seed)
    n = min(len(les), len(nor))
    keep_les = les if len(les) == n else np.sort(rng.choice(les, n, replace=False))
    keep_nor = nor if len(nor) == n else np.sort(rng.choice(nor, n, replace=False))
    return ds.subset(np.sort(np.concatenate([keep_les, keep_nor])))


def lesion_only(ds: SliceDataset) -> SliceDataset:
    return ds.subset(np.flatnonzero(ds.has_lesion))


def split_slices(ds: SliceDataset, test_ratio: float = 0.2, seed: int = 0) -> tuple[SliceDataset, SliceDataset]:
    """Stratified slice-level split: ``round(test_ratio * n_class)`` of each class to test."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for flag in (True, False):
        idx = np.flatnonzero(ds.has_lesion == flag)
        idx = idx[rng.permutation(len(idx))]
        n_test = int(round(test_ratio * len(idx)))
        test.append(idx[:n_test])
        train.append(idx[n_test:])
    return ds.subset(np.sort(np.concatenate(train))), ds.subset(np.sort(np.concatenate(test)))


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

def write_manifest(records: Sequence[CaseRecord], path) -> None:
    lines = ["# case_id\tvolume\tmask\tsplit"]
    lines += [f"{r.case_id}\t{r.volume_path}\t{r.mask_path}\t{r.split}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> list[CaseRecord]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"{path}: expected 4 tab-separated fields, got {line!r}")
        out.append(CaseRecord(*parts))
    return out


def write_slice_manifest(ds: SliceDataset, path) -> None:
    lines = ["# case_id\tplane\tslice_index\thas_lesion"]
    lines += [f"{c}\t{p}\t{i}\t{int(h)}" for c, p, i, h in zip(ds.case_ids, ds.planes, ds.slice_index, ds.has_lesion)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_slice_manifest(path) -> SliceDataset:
    rows = [l.split("\t") for l in Path(path).read_text().splitlines() if l.strip() and not l.startswith("#")]
    if not rows:
        return SliceDataset.empty()
    c, p, i, h = zip(*rows)
    return SliceDataset(np.array(c, dtype=object), np.array(p, dtype=object),
                        np.array(i, dtype=np.int64), np.array(h, dtype=np.int64).astype(bool))


__all__ = [
    "CaseRecord", "Ellipsoid", "FormatError", "LesionSpec", "SliceDataset", "UnsupportedError",
    "balance_for_classification", "ellipsoid_mask", "extract_slices", "lesion_only", "lesion_slices",
    "place_lesions", "read_manifest", "read_nifti", "read_raw", "read_slice_manifest", "read_volume",
    "split_cases", "split_slices", "synth_volume", "write_manifest", "write_raw", "write_slice_manifest",
]
