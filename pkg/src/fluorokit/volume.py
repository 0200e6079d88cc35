"""Scalar volume representation and the on-disk `.vjson` + `.raw` format.

A volume is an axis-aligned 3D grid in world mm. ``data`` is indexed
``data[ix, iy, iz]``; the center of voxel (0,0,0) sits at ``origin_mm`` and
voxel (i,j,k) at ``origin_mm + (i sx, j sy, k sz)``. On disk the blob is
little-endian with x varying fastest.

dtypes: int16 carries Hounsfield units, uint8 carries labels/occupancy
(0 = background, 1-5 = L1-L5 by convention), float32 carries derived
attenuation values.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidInputError

_DTYPES = {
    "int16": np.dtype("<i2"),
    "uint8": np.dtype("<u1"),
    "float32": np.dtype("<f4"),
}


@dataclass(frozen=True)
class Volume:
    data: np.ndarray  # shape (nx, ny, nz)
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or any(n < 1 for n in data.shape):
            raise InvalidInputError("volume data must be a 3D array with dims >= 1")
        if data.dtype.name not in _DTYPES:
            raise InvalidInputError(f"unsupported volume dtype {data.dtype.name}")
        spacing = tuple(float(s) for s in self.spacing_mm)
        origin = tuple(float(o) for o in self.origin_mm)
        if len(spacing) != 3 or any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise InvalidInputError("spacing_mm must be three positive finite values")
        if len(origin) != 3 or any(not np.isfinite(o) for o in origin):
            raise InvalidInputError("origin_mm must be three finite values")
        data = np.ascontiguousarray(data)
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "origin_mm", origin)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def dtype_name(self) -> str:
        return self.data.dtype.name

    def voxel_centers_axis(self, axis: int) -> np.ndarray:
        """World mm coordinates of voxel centers along one axis."""
        n = self.dims[axis]
        return self.origin_mm[axis] + self.spacing_mm[axis] * np.arange(n)

    def bounds_mm(self) -> tuple[np.ndarray, np.ndarray]:
        """Outer physical extent (half a voxel beyond the center lattice)."""
        o = np.array(self.origin_mm)
        s = np.array(self.spacing_mm)
        n = np.array(self.dims)
        return o - 0.5 * s, o + (n - 0.5) * s

    def world_extent_of_centers(self) -> tuple[np.ndarray, np.ndarray]:
        o = np.array(self.origin_mm)
        s = np.array(self.spacing_mm)
        n = np.array(self.dims)
        return o, o + (n - 1) * s


def _paths(header_path: str | Path) -> tuple[Path, Path]:
    header = Path(header_path)
    if header.suffix != ".vjson":
        header = header.with_suffix(".vjson")
    return header, header.with_suffix(".raw")


def save_volume(v: Volume, path: str | Path) -> Path:
    """Write the header/blob pair; returns the header path."""
    header_path, raw_path = _paths(path)
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "origin_mm": list(v.origin_mm),
        "dtype": v.dtype_name,
        "order": "x-fastest",
    }
    blob = np.ascontiguousarray(v.data.transpose(2, 1, 0)).astype(
        _DTYPES[v.dtype_name], copy=False
    )
    header_path.write_text(json.dumps(header, sort_keys=True) + "\n")
    raw_path.write_bytes(blob.tobytes())
    return header_path


def load_volume(header_path: str | Path) -> Volume:
    header_path, raw_path = _paths(header_path)
    try:
        header = json.loads(header_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read volume header {header_path}: {e}", field="header")
    for key in ("dims", "spacing_mm", "origin_mm", "dtype"):
        if key not in header:
            raise FormatError(f"volume header missing '{key}'", field=key)
    dims = header["dims"]
    if len(dims) != 3 or any(int(n) < 1 for n in dims):
        raise FormatError(f"bad dims {dims}", field="dims")
    dims = tuple(int(n) for n in dims)
    spacing = header["spacing_mm"]
    if len(spacing) != 3 or any(not np.isfinite(float(s)) or float(s) <= 0 for s in spacing):
        raise FormatError(f"bad spacing_mm {spacing}", field="spacing_mm")
    dtype_name = header["dtype"]
    if dtype_name not in _DTYPES:
        raise FormatError(f"unknown dtype '{dtype_name}'", field="dtype")
    if header.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"unsupported order '{header['order']}'", field="order")
    dtype = _DTYPES[dtype_name]
    raw = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(
            f"raw length mismatch: expected {expected} bytes for dims {dims}, "
            f"got {len(raw)}",
            field="raw length",
        )
    data = np.frombuffer(raw, dtype=dtype).reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0)
    return Volume(data, tuple(float(s) for s in spacing), tuple(float(o) for o in header["origin_mm"]))


def threshold_bone(v: Volume, hu_threshold: float = 0.0) -> Volume:
    """Attenuation volume a(x) = max(v(x) - threshold, 0).

    Soft tissue below the threshold contributes nothing to ray integrals.
    Accepts HU (int16) or an already-thresholded float32 volume.
    """
    if v.dtype_name == "uint8":
        raise InvalidInputError("threshold_bone expects an HU or attenuation volume, not labels")
    a = np.maximum(v.data.astype(np.float32) - np.float32(hu_threshold), np.float32(0.0))
    return Volume(a, v.spacing_mm, v.origin_mm)


def label_mask(labels: Volume, label_id: int) -> Volume:
    """Binary {0,1} volume marking voxels equal to ``label_id``."""
    if labels.dtype_name != "uint8":
        raise InvalidInputError("label volumes must be uint8")
    return Volume(
        (labels.data == label_id).astype(np.uint8), labels.spacing_mm, labels.origin_mm
    )


def label_ids(labels: Volume) -> list[int]:
    """Sorted nonzero label ids present in a label volume."""
    ids = np.unique(labels.data)
    return [int(i) for i in ids if i != 0]


def label_bbox_center_mm(labels: Volume, label_id: int) -> np.ndarray:
    """World mm center of the tight 3D bounding box of a label."""
    idx = np.nonzero(labels.data == label_id)
    if idx[0].size == 0:
        raise InvalidInputError(f"label {label_id} not present")
    lo = np.array([a.min() for a in idx], dtype=np.float64)
    hi = np.array([a.max() for a in idx], dtype=np.float64)
    center_vox = (lo + hi) / 2.0
    return np.array(labels.origin_mm) + center_vox * np.array(labels.spacing_mm)


def label_centroid_mm(labels: Volume, label_id: int) -> np.ndarray:
    """World mm centroid (mean voxel center) of a label."""
    idx = np.nonzero(labels.data == label_id)
    if idx[0].size == 0:
        raise InvalidInputError(f"label {label_id} not present")
    c = np.array([a.mean() for a in idx], dtype=np.float64)
    return np.array(labels.origin_mm) + c * np.array(labels.spacing_mm)
