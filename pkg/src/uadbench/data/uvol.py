"""Native volume format: ASCII header + raw little-endian payload.

Layout of a ``.uvol`` file:

    uvol 1
    dims <d0> <d1> <d2>
    spacing <s0> <s1> <s2>
    dtype float32
    byteorder little
    modality <tag>
    end_header
    <d0*d1*d2 float32 voxels, C order><d0*d1*d2 uint8 mask>

A sidecar ``<stem>.json`` duplicates the metadata for external tooling.
The format is bit-exact by construction: float32 in, float32 out.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import VolumeDecodeError, VolumeIntegrityError
from .volume import MODALITIES, Volume

_MAGIC = "uvol 1"


def write_volume(volume: Volume, path: str | Path) -> Path:
    """Serialize ``volume`` to ``path`` (extension forced to .uvol) plus sidecar."""
    path = Path(path).with_suffix(".uvol")
    d0, d1, d2 = volume.shape
    header = (
        f"{_MAGIC}\n"
        f"dims {d0} {d1} {d2}\n"
        f"spacing {volume.spacing_mm[0]!r} {volume.spacing_mm[1]!r} {volume.spacing_mm[2]!r}\n"
        "dtype float32\n"
        "byteorder little\n"
        f"modality {volume.modality}\n"
        "end_header\n"
    )
    voxels = np.ascontiguousarray(volume.voxels, dtype="<f4")
    mask = np.ascontiguousarray(volume.brain_mask, dtype=np.uint8)
    with path.open("wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(voxels.tobytes())
        fh.write(mask.tobytes())
    sidecar = {
        "shape": [d0, d1, d2],
        "spacing_mm": list(volume.spacing_mm),
        "modality": volume.modality,
        "dtype": "float32",
        "byteorder": "little",
        "voxel_bytes": voxels.nbytes,
        "mask_bytes": mask.nbytes,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=1))
    return path


def _parse_header(raw: bytes, path: Path) -> tuple[dict, int]:
    end = raw.find(b"end_header\n")
    if end < 0:
        raise VolumeDecodeError(f"{path}: missing end_header marker")
    try:
        text = raw[:end].decode("ascii")
    except UnicodeDecodeError as exc:
        raise VolumeDecodeError(f"{path}: header is not ASCII: {exc}") from exc
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _MAGIC:
        raise VolumeDecodeError(f"{path}: bad magic line (field 'magic')")
    fields: dict[str, str] = {}
    for ln in lines[1:]:
        key, _, value = ln.partition(" ")
        fields[key] = value
    return fields, end + len(b"end_header\n")


def read_volume(path: str | Path) -> Volume:
    """Parse a ``.uvol`` file back into a :class:`Volume`.

    Raises :class:`VolumeDecodeError` naming the offending header field, or
    :class:`VolumeIntegrityError` when header and payload sizes disagree.
    """
    path = Path(path)
    raw = path.read_bytes()
    fields, offset = _parse_header(raw, path)

    def _field(name: str) -> str:
        if name not in fields:
            raise VolumeDecodeError(f"{path}: missing header field '{name}'")
        return fields[name]

    try:
        dims = tuple(int(v) for v in _field("dims").split())
    except ValueError as exc:
        raise VolumeDecodeError(f"{path}: unparsable field 'dims': {exc}") from exc
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise VolumeDecodeError(f"{path}: field 'dims' must be 3 positive ints, got {dims}")
    try:
        spacing = tuple(float(v) for v in _field("spacing").split())
    except ValueError as exc:
        raise VolumeDecodeError(f"{path}: unparsable field 'spacing': {exc}") from exc
    if len(spacing) != 3:
        raise VolumeDecodeError(f"{path}: field 'spacing' must have 3 components")
    if _field("dtype") != "float32":
        raise VolumeDecodeError(f"{path}: unsupported field 'dtype': {fields['dtype']}")
    if _field("byteorder") != "little":
        raise VolumeDecodeError(f"{path}: unsupported field 'byteorder': {fields['byteorder']}")
    modality = _field("modality")
    if modality not in MODALITIES:
        raise VolumeDecodeError(f"{path}: unknown field 'modality': {modality}")

    n = dims[0] * dims[1] * dims[2]
    expected = n * 4 + n
    payload = raw[offset:]
    if len(payload) != expected:
        raise VolumeIntegrityError(
            f"{path}: payload has {len(payload)} bytes, header implies {expected}"
        )
    voxels = np.frombuffer(payload[: n * 4], dtype="<f4").reshape(dims)
    mask = np.frombuffer(payload[n * 4 :], dtype=np.uint8).reshape(dims).astype(bool)
    return Volume(voxels=voxels.copy(), spacing_mm=spacing, modality=modality, brain_mask=mask)
