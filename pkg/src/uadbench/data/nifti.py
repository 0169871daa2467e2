"""Minimal NIfTI-1 ingestion (read only, gzip or raw).

Only the header fields needed to map a scan into a :class:`Volume` are
parsed. The brain mask defaults to strictly positive voxels, which matches
skull-stripped inputs where background is exactly zero.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from ..errors import VolumeDecodeError, VolumeIntegrityError
from .volume import Volume

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}


def read_nifti(path: str | Path, modality: str = "T1w") -> Volume:
    """Load a ``.nii`` / ``.nii.gz`` scan as a Volume.

    Raises :class:`VolumeDecodeError` for malformed headers and
    :class:`VolumeIntegrityError` when the data block is shorter than the
    header-implied size.
    """
    path = Path(path)
    opener = gzip.open if path.name.endswith(".gz") else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 348:
        raise VolumeDecodeError(f"{path}: file shorter than the 348-byte header")

    order = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != 348:
        (sizeof_hdr,) = struct.unpack_from(">i", raw, 0)
        if sizeof_hdr != 348:
            raise VolumeDecodeError(f"{path}: bad field 'sizeof_hdr' (not 348 in either byte order)")
        order = ">"

    magic = raw[344:348]
    if magic[:3] not in (b"n+1", b"ni1"):
        raise VolumeDecodeError(f"{path}: bad field 'magic': {magic!r}")

    dim = struct.unpack_from(order + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise VolumeDecodeError(f"{path}: bad field 'dim[0]': {ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if any(d <= 0 for d in shape[:3]):
        raise VolumeDecodeError(f"{path}: nonpositive field 'dim': {shape}")
    if len(shape) > 3 and any(d != 1 for d in shape[3:]):
        raise VolumeDecodeError(f"{path}: field 'dim' has a nontrivial 4th axis: {shape}")
    shape = shape[:3] if len(shape) >= 3 else shape + (1,) * (3 - len(shape))

    (datatype,) = struct.unpack_from(order + "h", raw, 70)
    if datatype not in _DTYPES:
        raise VolumeDecodeError(f"{path}: unsupported field 'datatype': {datatype}")
    pixdim = struct.unpack_from(order + "8f", raw, 76)
    spacing = tuple(float(abs(p)) if p != 0 else 1.0 for p in pixdim[1:4])
    (vox_offset,) = struct.unpack_from(order + "f", raw, 108)
    scl_slope, scl_inter = struct.unpack_from(order + "2f", raw, 112)

    dtype = np.dtype(_DTYPES[datatype]).newbyteorder(order)
    n = int(np.prod(shape))
    start = int(vox_offset)
    need = n * dtype.itemsize
    if len(raw) - start < need:
        raise VolumeIntegrityError(
            f"{path}: data block has {len(raw) - start} bytes, header implies {need}"
        )
    data = np.frombuffer(raw, dtype=dtype, count=n, offset=start)
    data = data.reshape(shape, order="F").astype(np.float32)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        slope = scl_slope if scl_slope != 0.0 else 1.0
        data = data * np.float32(slope) + np.float32(scl_inter)
    return Volume(
        voxels=data,
        spacing_mm=spacing,
        modality=modality,
        brain_mask=data > 0,
    )
