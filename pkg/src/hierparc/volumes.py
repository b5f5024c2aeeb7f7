"""Volume type and the binary container shared by images, label maps and uncertainty maps.

Layout (little-endian)::

    magic   4s   b"HPVL"
    version u16
    dtype   u8   see DTYPE_CODES
    ndim    u8   3 or 4 (trailing channel axis)
    dims    u32 * ndim
    voxel   f64 * 3  voxel size in mm
    payload C-order array
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ValidationError

VOLUME_MAGIC = b"HPVL"
VOLUME_VERSION = 1
DTYPE_CODES = {1: "<u1", 2: "<i4", 3: "<f4", 4: "<f8"}
_CODE_OF = {np.dtype(v): k for k, v in DTYPE_CODES.items()}


@dataclass
class Volume:
    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)
    id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ValidationError(f"volume must be 3D, got shape {self.data.shape}")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)

    @property
    def shape(self):
        return self.data.shape


def save_array(path, array: np.ndarray, voxel_size=(1.0, 1.0, 1.0)) -> None:
    array = np.asarray(array)
    if array.dtype == np.bool_:
        array = array.astype(np.uint8)
    elif array.dtype.kind in "iu" and array.dtype != np.uint8:
        array = array.astype(np.int32)
    dtype = np.dtype(array.dtype).newbyteorder("<")
    if dtype not in _CODE_OF:
        raise ValidationError(f"unsupported dtype {array.dtype}")
    if array.ndim not in (3, 4):
        raise ValidationError(f"container holds 3D or 4D arrays, got {array.ndim}D")
    header = VOLUME_MAGIC + struct.pack("<HBB", VOLUME_VERSION, _CODE_OF[dtype], array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    header += struct.pack("<3d", *voxel_size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype=dtype).tobytes())


def load_array(path) -> tuple[np.ndarray, tuple[float, float, float]]:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != VOLUME_MAGIC:
        raise FormatError(f"{path}: not a volume container")
    version, code, ndim = struct.unpack_from("<HBB", data, 4)
    if version != VOLUME_VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    if code not in DTYPE_CODES or ndim not in (3, 4):
        raise FormatError(f"{path}: bad dtype code {code} or ndim {ndim}")
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    off = 8 + 4 * ndim
    voxel = struct.unpack_from("<3d", data, off)
    off += 24
    dtype = np.dtype(DTYPE_CODES[code])
    count = int(np.prod(dims))
    if len(data) - off != count * dtype.itemsize:
        raise FormatError(f"{path}: payload size does not match header")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=off).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), voxel


def save_volume(path, volume: Volume) -> None:
    save_array(path, volume.data.astype(np.float32), volume.voxel_size)


def load_volume(path, id: str = "") -> Volume:
    arr, voxel = load_array(path)
    if arr.ndim != 3:
        raise FormatError(f"{path}: expected a 3D volume, got {arr.ndim}D")
    return Volume(arr, voxel, id or str(path))
