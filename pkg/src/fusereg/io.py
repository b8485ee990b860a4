"""NIfTI-1 volume/field I/O and landmark CSV I/O.

Single-file NIfTI-1 (.nii or .nii.gz) only. On-disk datatype may be
int16, float32 or float64; everything is converted to float32 in memory.
Spacing comes from pixdim, the origin from the s-form translation when an
s-form is present (q-offset as fallback). Saved volumes are always
float32 with an axis-aligned s-form.

Displacement fields are stored as 4D NIfTI with the vector dimension
last (x, y, z components, voxel units), plus a JSON sidecar recording
that convention.
"""
from __future__ import annotations

import csv
import gzip
import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .volume import LandmarkSet, Volume3D

PathLike = Union[str, Path]

_HDR_SIZE = 348
# (datatype code, numpy dtype); little-endian on disk
_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4"), 64: np.dtype("<f8")}
_VECTOR_INTENT = 1007  # NIFTI_INTENT_VECTOR


class VolumeIOError(RuntimeError):
    """Raised when a volume or landmark file cannot be read or written."""


def _open(path: PathLike, mode: str):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, mode)
    return open(path, mode)


def _unreadable(path: PathLike, why: str) -> VolumeIOError:
    return VolumeIOError(f"unreadable volume {path}: {why}")


def _parse_header(raw: bytes, path: PathLike) -> dict:
    if len(raw) < _HDR_SIZE:
        raise _unreadable(path, f"file too short for a NIfTI-1 header ({len(raw)} bytes)")
    if raw[344:348] != b"n+1\x00":
        raise _unreadable(path, "missing single-file NIfTI-1 magic")
    for order in ("<", ">"):
        if struct.unpack(order + "i", raw[:4])[0] == _HDR_SIZE:
            break
    else:
        raise _unreadable(path, "sizeof_hdr is not 348")
    dim = struct.unpack(order + "8h", raw[40:56])
    datatype, bitpix = struct.unpack(order + "2h", raw[70:74])
    pixdim = struct.unpack(order + "8f", raw[76:108])
    vox_offset = struct.unpack(order + "f", raw[108:112])[0]
    scl_slope, scl_inter = struct.unpack(order + "2f", raw[112:120])
    qform_code, sform_code = struct.unpack(order + "2h", raw[252:256])
    quatern = struct.unpack(order + "6f", raw[256:280])
    srow = struct.unpack(order + "12f", raw[280:328])
    if not 1 <= dim[0] <= 7:
        raise _unreadable(path, f"dim[0] out of range: {dim[0]}")
    if datatype not in _DTYPES:
        raise _unreadable(path, f"unsupported datatype code {datatype}")
    return {
        "order": order,
        "dim": dim,
        "datatype": datatype,
        "bitpix": bitpix,
        "pixdim": pixdim,
        "vox_offset": int(vox_offset),
        "scl": (scl_slope, scl_inter),
        "qform_code": qform_code,
        "sform_code": sform_code,
        "qoffset": quatern[3:6],
        "srow": srow,
    }


def _read_raw(path: PathLike) -> tuple[dict, np.ndarray]:
    path = Path(path)
    try:
        with _open(path, "rb") as fh:
            raw = fh.read()
    except (OSError, EOFError) as exc:
        raise _unreadable(path, str(exc)) from exc
    hdr = _parse_header(raw, path)
    ndim = hdr["dim"][0]
    shape_xyz = hdr["dim"][1 : 1 + ndim]
    if any(s < 1 for s in shape_xyz):
        raise _unreadable(path, f"non-positive dimension in {shape_xyz}")
    dtype = _DTYPES[hdr["datatype"]]
    if hdr["order"] == ">":
        dtype = dtype.newbyteorder(">")
    count = int(np.prod(shape_xyz))
    start = hdr["vox_offset"]
    end = start + count * dtype.itemsize
    if end > len(raw):
        raise _unreadable(path, "data section truncated")
    data = np.frombuffer(raw[start:end], dtype=dtype).astype(np.float64)
    slope, inter = hdr["scl"]
    if slope not in (0.0, 1.0) or (slope == 1.0 and inter != 0.0):
        data = data * slope + inter
    # disk order: x fastest; reshape with reversed dims gives [..., z, y, x]
    data = data.reshape(tuple(reversed(shape_xyz)))
    return hdr, data


def _grid_meta(hdr: dict) -> tuple[tuple, tuple]:
    spacing = tuple(float(p) for p in hdr["pixdim"][1:4])
    if hdr["sform_code"] > 0:
        origin = (float(hdr["srow"][3]), float(hdr["srow"][7]), float(hdr["srow"][11]))
    elif hdr["qform_code"] > 0:
        origin = tuple(float(q) for q in hdr["qoffset"])
    else:
        origin = (0.0, 0.0, 0.0)
    return spacing, origin


def load_volume(path: PathLike) -> Volume3D:
    """Read a scalar 3D NIfTI-1 volume."""
    hdr, data = _read_raw(path)
    ndim = hdr["dim"][0]
    if ndim == 4 and hdr["dim"][4] == 1:
        data = data[0]
    elif ndim != 3:
        raise _unreadable(path, f"expected a scalar 3D volume, got dim[0]={ndim}")
    spacing, origin = _grid_meta(hdr)
    return Volume3D(data.astype(np.float32), spacing, origin)


def _pack_header(
    shape_zyx: tuple[int, ...],
    spacing: tuple[float, float, float],
    origin: tuple[float, float, float],
    vec_dim: int = 0,
) -> bytes:
    nz, ny, nx = shape_zyx[-3:]
    if vec_dim:
        dim = (4, nx, ny, nz, vec_dim, 1, 1, 1)
        intent = _VECTOR_INTENT
    else:
        dim = (3, nx, ny, nz, 1, 1, 1, 1)
        intent = 0
    pixdim = (1.0, spacing[0], spacing[1], spacing[2], 0.0, 0.0, 0.0, 0.0)
    srow_x = (spacing[0], 0.0, 0.0, origin[0])
    srow_y = (0.0, spacing[1], 0.0, origin[1])
    srow_z = (0.0, 0.0, spacing[2], origin[2])
    hdr = bytearray(_HDR_SIZE)
    struct.pack_into("<i", hdr, 0, _HDR_SIZE)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 68, intent)
    struct.pack_into("<2h", hdr, 70, 16, 32)  # float32, 32 bits/voxel
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope/inter
    struct.pack_into("<b", hdr, 123, 2)  # xyzt_units: mm
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform off, sform on
    struct.pack_into("<4f", hdr, 280, *srow_x)
    struct.pack_into("<4f", hdr, 296, *srow_y)
    struct.pack_into("<4f", hdr, 312, *srow_z)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr) + b"\x00\x00\x00\x00"  # empty extender


def save_volume(vol: Volume3D, path: PathLike) -> None:
    """Write a volume as single-file float32 NIfTI-1."""
    payload = _pack_header(vol.shape, vol.spacing, vol.origin)
    body = np.ascontiguousarray(vol.data, dtype="<f4").tobytes()
    try:
        with _open(path, "wb") as fh:
            fh.write(payload + body)
    except OSError as exc:
        raise VolumeIOError(f"cannot write volume {path}: {exc}") from exc


_FIELD_SIDECAR = {
    "kind": "displacement_field",
    "units": "voxels",
    "component_order": "xyz",
    "mapping": "backward",
    "note": "warped(p) = moving(p + u(p)); u defined on the fixed grid",
}


def _sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    name = path.name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return path.with_name(name[: -len(suffix)] + ".json")
    return path.with_suffix(".json")


def save_field(
    u: np.ndarray,
    path: PathLike,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> None:
    """Write a (3, D, H, W) displacement field as 4D NIfTI + JSON sidecar."""
    u = np.asarray(u, dtype=np.float32)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ValueError(f"field must be (3, D, H, W), got {u.shape}")
    payload = _pack_header(u.shape[1:], spacing, origin, vec_dim=3)
    body = np.ascontiguousarray(u, dtype="<f4").tobytes()
    try:
        with _open(path, "wb") as fh:
            fh.write(payload + body)
    except OSError as exc:
        raise VolumeIOError(f"cannot write field {path}: {exc}") from exc
    _sidecar_path(path).write_text(json.dumps(_FIELD_SIDECAR, indent=2) + "\n")


def load_field(path: PathLike) -> np.ndarray:
    """Read a 4D displacement field saved by :func:`save_field`."""
    hdr, data = _read_raw(path)
    if hdr["dim"][0] != 4 or hdr["dim"][4] != 3:
        raise _unreadable(path, "expected a 4D field with 3 vector components")
    return data.astype(np.float32)  # already (3, D, H, W)


_LANDMARK_HEADER = ["Landmark", "X", "Y", "Z"]


def load_landmarks(path: PathLike) -> LandmarkSet:
    """Read a ``Landmark,X,Y,Z`` CSV (world mm)."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise VolumeIOError(f"unreadable landmarks {path}: {exc}") from exc
    if not rows or [c.strip() for c in rows[0]] != _LANDMARK_HEADER:
        raise VolumeIOError(f"unreadable landmarks {path}: expected header 'Landmark,X,Y,Z'")
    entries = []
    for row in rows[1:]:
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 4:
            raise VolumeIOError(f"unreadable landmarks {path}: bad row {row!r}")
        entries.append((int(row[0]), float(row[1]), float(row[2]), float(row[3])))
    return LandmarkSet.from_entries(entries)


def save_landmarks(landmarks: LandmarkSet, path: PathLike) -> None:
    """Write landmarks as CSV; coordinates use shortest round-trip repr."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_LANDMARK_HEADER)
        for lm_id, x, y, z in landmarks.entries():
            writer.writerow([lm_id, repr(x), repr(y), repr(z)])
