"""Single-file NIfTI-1 volumes, slicing along anatomical axes, PPM overlays.

Only the ``.nii`` / ``.nii.gz`` single-file form with datatypes uint8 (2),
int16 (4) and float32 (16) is supported.  Axes of the stored grid map to
sagittal = X, coronal = Y, axial = Z.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

HEADER_SIZE = 348
VOX_OFFSET = 352

DATATYPES = {2: np.dtype(np.uint8), 4: np.dtype(np.int16), 16: np.dtype(np.float32)}
DATATYPE_CODES = {"uint8": 2, "int16": 4, "float32": 16}
AXES = {"sagittal": 0, "coronal": 1, "axial": 2}


class NiftiError(ValueError):
    """A file is not a readable single-file NIfTI-1 volume."""


@dataclass
class Volume:
    voxels: np.ndarray  # shape (X, Y, Z)
    spacing: Optional[tuple] = None
    source_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"volume must be 3-D with positive extents, got shape {v.shape}")
        if v.dtype.name not in DATATYPE_CODES:
            raise ValueError(f"unsupported voxel dtype {v.dtype}; expected one of {sorted(DATATYPE_CODES)}")
        self.voxels = v
        if self.spacing is not None:
            self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple:
        return self.voxels.shape

    @property
    def datatype(self) -> str:
        return self.voxels.dtype.name


@dataclass
class SliceStack:
    slices: np.ndarray  # (n, a, b)
    axis: str
    indices: list = field(default_factory=list)
    source_id: str = ""

    def __len__(self) -> int:
        return len(self.slices)


# --------------------------------------------------------------------------
# NIfTI-1


def _open_bytes(path) -> bytes:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_nifti(path) -> Volume:
    """Parse a single-file NIfTI-1 volume (optionally gzip-compressed).

    Byte order is detected from ``sizeof_hdr``.  When ``scl_slope`` is
    non-zero and not the identity, scaled values are returned as float32.
    """
    raw = _open_bytes(path)
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes, need {HEADER_SIZE})")
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == HEADER_SIZE:
            break
    else:
        if struct.unpack("<i", raw[:4])[0] == 540 or struct.unpack(">i", raw[:4])[0] == 540:
            raise NiftiError(f"{path}: NIfTI-2 is not supported")
        raise NiftiError(f"{path}: bad sizeof_hdr, not a NIfTI-1 file")

    magic = raw[344:348]
    if magic == b"ni1\x00":
        raise NiftiError(f"{path}: unsupported form (detached .hdr/.img pair); only single-file n+1 is read")
    if magic != b"n+1\x00":
        raise NiftiError(f"{path}: bad magic {magic!r}, expected b'n+1\\x00'")

    dim = struct.unpack(endian + "8h", raw[40:56])
    if dim[0] not in (2, 3):
        raise NiftiError(f"{path}: dim[0] = {dim[0]}, only 2-D and 3-D volumes are supported")
    shape = tuple(int(d) for d in dim[1:1 + dim[0]])
    if dim[0] == 2:
        shape = shape + (1,)
    if min(shape) < 1:
        raise NiftiError(f"{path}: non-positive extent in dims {shape}")

    code = struct.unpack(endian + "h", raw[70:72])[0]
    if code not in DATATYPES:
        raise NiftiError(f"{path}: unsupported datatype code {code} (supported: 2, 4, 16)")
    dtype = DATATYPES[code].newbyteorder(endian)

    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    if vox_offset < VOX_OFFSET:
        raise NiftiError(f"{path}: vox_offset {vox_offset} < {VOX_OFFSET} for a single-file NIfTI-1")

    count = shape[0] * shape[1] * shape[2]
    nbytes = count * dtype.itemsize
    if len(raw) < vox_offset + nbytes:
        raise NiftiError(
            f"{path}: truncated data ({len(raw) - vox_offset} of {nbytes} voxel bytes present)")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    voxels = flat.reshape(shape, order="F").astype(DATATYPES[code])
    if slope != 0 and not (slope == 1 and inter == 0):
        voxels = (voxels.astype(np.float64) * slope + inter).astype(np.float32)

    spacing = tuple(float(p) for p in pixdim[1:4])
    source = Path(path).name
    for ext in (".gz", ".nii"):
        source = source[: -len(ext)] if source.endswith(ext) else source
    return Volume(voxels, spacing, source)


def nifti_header(vol: Volume, endian: str = "<") -> bytes:
    x, y, z = vol.dims
    code = DATATYPE_CODES[vol.datatype]
    spacing = vol.spacing or (1.0, 1.0, 1.0)
    hdr = bytearray(HEADER_SIZE)

    def put(fmt, offset, *values):
        struct.pack_into(endian + fmt, hdr, offset, *values)

    put("i", 0, HEADER_SIZE)
    put("8h", 40, 3, x, y, z, 1, 1, 1, 1)
    put("h", 70, code)
    put("h", 72, vol.voxels.dtype.itemsize * 8)
    put("8f", 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    put("f", 108, float(VOX_OFFSET))
    put("2f", 112, 1.0, 0.0)
    hdr[123] = 2  # xyzt_units: mm
    descrip = (vol.source_id or "liverseg").encode("ascii", "replace")[:79]
    hdr[148:148 + len(descrip)] = descrip
    put("h", 252, 0)  # qform_code
    put("h", 254, 1)  # sform_code: scanner
    put("4f", 280, spacing[0], 0.0, 0.0, 0.0)
    put("4f", 296, 0.0, spacing[1], 0.0, 0.0)
    put("4f", 312, 0.0, 0.0, spacing[2], 0.0)
    hdr[344:348] = b"n+1\x00"
    return bytes(hdr)


def write_nifti(vol: Volume, path, endian: str = "<") -> None:
    """Write ``vol`` as a single-file NIfTI-1 (gzip when the name ends in .gz)."""
    if endian not in "<>":
        raise ValueError(f"endian must be '<' or '>', got {endian!r}")
    data = np.asarray(vol.voxels, dtype=vol.voxels.dtype.newbyteorder(endian))
    payload = nifti_header(vol, endian) + b"\x00" * (VOX_OFFSET - HEADER_SIZE) + data.tobytes(order="F")
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    if str(path).endswith(".gz"):
        # mtime pinned so identical volumes give identical files
        payload = gzip.compress(payload, mtime=0)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# slicing


def slice_volume(vol: Volume, axis: str = "sagittal") -> SliceStack:
    """One float64 2-D slice per index along ``axis``."""
    if axis not in AXES:
        raise ValueError(f"unknown axis {axis!r}; expected one of {sorted(AXES)}")
    moved = np.moveaxis(vol.voxels, AXES[axis], 0).astype(np.float64)
    return SliceStack(moved, axis, list(range(len(moved))), vol.source_id)


def restack(stack: SliceStack, dtype=None, spacing=None) -> Volume:
    """Inverse of :func:`slice_volume`."""
    vox = np.moveaxis(np.asarray(stack.slices), 0, AXES[stack.axis])
    if dtype is not None:
        vox = vox.astype(dtype)
    return Volume(np.ascontiguousarray(vox), spacing, stack.source_id)


# --------------------------------------------------------------------------
# overlays


def to_gray_u8(img: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return arr.copy()
    from liverseg.preprocess import quantize_u8

    return quantize_u8(arr)[0]


def overlay_rgb(gray: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Blend masked pixels half-and-half with pure red; returns (H, W, 3) uint8."""
    g = to_gray_u8(gray)
    m = np.asarray(mask)
    if g.shape != m.shape:
        raise ValueError(f"overlay: slice shape {g.shape} != mask shape {m.shape}")
    if not np.isin(m, (0, 1)).all():
        raise ValueError("overlay mask must be binary (0/1)")
    rgb = np.repeat(g[:, :, None].astype(np.float64), 3, axis=2)
    sel = m.astype(bool)
    rgb[sel, 0] = 0.5 * rgb[sel, 0] + 127.5
    rgb[sel, 1] *= 0.5
    rgb[sel, 2] *= 0.5
    return np.floor(rgb + 0.5).astype(np.uint8)


def write_ppm(rgb: np.ndarray, path) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w = rgb.shape[:2]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8).reshape(h, w, 3)


def write_overlay(gray: np.ndarray, mask: np.ndarray, path) -> np.ndarray:
    """Render ``mask`` in red over ``gray`` and save it as binary PPM (P6)."""
    rgb = overlay_rgb(gray, mask)
    write_ppm(rgb, path)
    return rgb
