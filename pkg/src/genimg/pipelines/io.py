"""Image file formats.

* 2D images: 16-bit grayscale PNG, values ``round(v * 65535)`` for ``v`` in [0, 1].
* 3D volumes: uncompressed NIfTI-1 (``.nii``), float32, identity affine.
* Arbitrary arrays: raw container (``.gra``) with a 64-byte little-endian header

  ======  =====  =====================================================
  offset  size   field
  ======  =====  =====================================================
  0       8      magic ``b"GENIMGRA"``
  8       2      format version, uint16 (= 1)
  10      1      dtype code, uint8 (see ``RAW_DTYPES``)
  11      1      rank, uint8 (0..6)
  12      4      reserved, zero
  16      48     six uint64 dims; unused trailing dims are zero
  ======  =====  =====================================================

  followed by the C-order array payload in little-endian byte order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from ..foundation import ConfigError, RangeError, ShapeMismatch

RAW_MAGIC = b"GENIMGRA"
RAW_VERSION = 1
RAW_HEADER = struct.Struct("<8sHBB4x6Q")
RAW_DTYPES = {1: "u1", 2: "<u2", 3: "<i4", 4: "<i8", 5: "<f4", 6: "<f8"}
_DTYPE_CODES = {np.dtype(v).newbyteorder("<").str: k for k, v in RAW_DTYPES.items()}

assert RAW_HEADER.size == 64


def write_png16(path, image: np.ndarray) -> None:
    a = np.asarray(image, dtype=np.float64)
    if a.ndim != 2:
        raise ShapeMismatch(f"PNG needs a 2D array, got shape {a.shape}")
    if a.min() < 0 or a.max() > 1:
        raise RangeError("PNG intensities must lie in [0, 1]")
    Image.fromarray(np.round(a * 65535).astype(np.uint16)).save(path, format="PNG")


def read_png16(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float32) / 65535.0


def write_nifti(path, volume: np.ndarray) -> None:
    import nibabel as nib

    nib.save(nib.Nifti1Image(np.asarray(volume, dtype=np.float32), np.eye(4)), str(path))


def read_nifti(path) -> np.ndarray:
    import nibabel as nib

    return np.asarray(nib.load(str(path)).get_fdata(dtype=np.float32))


def write_raw(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array)
    code = _DTYPE_CODES.get(a.dtype.newbyteorder("<").str)
    if code is None:
        raise ConfigError(f"dtype {a.dtype} is not supported by the raw container")
    if a.ndim > 6:
        raise ShapeMismatch("raw container supports rank <= 6")
    dims = list(a.shape) + [0] * (6 - a.ndim)
    with open(path, "wb") as fh:
        fh.write(RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, code, a.ndim, *dims))
        fh.write(a.astype(RAW_DTYPES[code], copy=False).tobytes(order="C"))


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < RAW_HEADER.size:
        raise ConfigError(f"{path}: truncated raw header")
    magic, version, code, rank, *dims = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC or version != RAW_VERSION or code not in RAW_DTYPES or rank > 6:
        raise ConfigError(f"{path}: not a version-{RAW_VERSION} raw container")
    shape = tuple(dims[:rank])
    arr = np.frombuffer(data, dtype=RAW_DTYPES[code], offset=RAW_HEADER.size)
    if arr.size != int(np.prod(shape)):
        raise ConfigError(f"{path}: payload size does not match header dims {shape}")
    return arr.reshape(shape).copy()


FORMATS = {"png_2d": (".png", write_png16, read_png16),
           "nifti_3d": (".nii", write_nifti, read_nifti),
           "raw_array": (".gra", write_raw, read_raw)}


def write_array(path, array, fmt: str) -> None:
    FORMATS[fmt][1](path, array)


def read_array(path, fmt: str) -> np.ndarray:
    if fmt not in FORMATS:
        raise ConfigError(f"unknown format {fmt!r}")
    return FORMATS[fmt][2](path)
