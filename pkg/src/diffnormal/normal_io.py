"""On-disk formats: the ``DNFR`` float raster and the 8-bit normal-map codec.

``DNFR`` layout (little-endian)::

    b"DNFR" | u8 version (=1) | u32 height | u32 width | u32 channels | f32 payload

The payload is row-major and channel-interleaved, ``H*W*C*4`` bytes.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from diffnormal.metrics import NormalMap

MAGIC = b"DNFR"
VERSION = 1
HEADER = struct.Struct("<4sBIII")
MAX_DIM = 1 << 20
MAX_PAYLOAD = 1 << 34


class RasterFormatError(ValueError):
    """Base class for malformed ``DNFR`` files."""


class BadMagicError(RasterFormatError):
    pass


class BadVersionError(RasterFormatError):
    pass


class TruncatedPayloadError(RasterFormatError):
    pass


class DimensionOverflowError(RasterFormatError):
    pass


def _as_hwc(raster) -> np.ndarray:
    a = np.asarray(raster)
    if a.ndim == 2:
        a = a[..., None]
    if a.ndim != 3 or min(a.shape) <= 0:
        raise ValueError(f"raster must be (H, W[, C]) with positive dims, got {a.shape}")
    return a


def encode_float_raster(raster) -> bytes:
    a = _as_hwc(raster)
    if not np.all(np.isfinite(a)):
        raise ValueError("refusing to write non-finite values")
    h, w, c = a.shape
    return HEADER.pack(MAGIC, VERSION, h, w, c) + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode_float_raster(data: bytes) -> np.ndarray:
    if len(data) < HEADER.size:
        if data[:4] != MAGIC[: len(data[:4])]:
            raise BadMagicError("bad magic")
        raise TruncatedPayloadError("file shorter than the header")
    magic, version, h, w, c = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported version {version}")
    if min(h, w, c) == 0 or max(h, w, c) > MAX_DIM or h * w * c * 4 > MAX_PAYLOAD:
        raise DimensionOverflowError(f"implausible dimensions {h}x{w}x{c}")
    n = h * w * c
    if len(data) - HEADER.size < 4 * n:
        raise TruncatedPayloadError(f"payload holds {len(data) - HEADER.size} bytes, need {4 * n}")
    return np.frombuffer(data, dtype="<f4", count=n, offset=HEADER.size).reshape(h, w, c).astype(np.float32)


def write_float_raster(path, raster) -> None:
    Path(path).write_bytes(encode_float_raster(raster))


def read_float_raster(path) -> np.ndarray:
    """Read a ``DNFR`` file as a ``(H, W, C)`` float32 array."""
    return decode_float_raster(Path(path).read_bytes())


def encode_normal_8bit(n: NormalMap) -> tuple[np.ndarray, np.ndarray]:
    """Map ``[-1, 1]`` to ``[0, 255]`` via ``round((v + 1) * 127.5)``; invalid pixels are zero."""
    codes = np.clip(np.round((n.vectors + 1.0) * 127.5), 0, 255).astype(np.uint8)
    codes[~n.mask] = 0
    return codes, n.mask.copy()


def decode_normal_8bit(raster, mask=None) -> NormalMap:
    """Inverse of :func:`encode_normal_8bit`, renormalized to unit length.

    Without a mask, all-zero pixels are treated as invalid.
    """
    raster = np.asarray(raster)
    if raster.ndim != 3 or raster.shape[2] != 3:
        raise ValueError(f"8-bit normal raster needs 3 channels, got {raster.shape}")
    if mask is None:
        mask = np.any(raster != 0, axis=-1)
    raw = raster.astype(np.float64) / 127.5 - 1.0
    return NormalMap.from_raw(raw, mask)


def write_normal_map(path_stem, n: NormalMap) -> tuple[Path, Path]:
    """Store a normal map as ``<stem>.dnfr`` plus a single-channel ``<stem>.mask.dnfr``."""
    stem = Path(path_stem)
    vec_path = stem.with_name(stem.name + ".dnfr")
    mask_path = stem.with_name(stem.name + ".mask.dnfr")
    write_float_raster(vec_path, n.vectors)
    write_float_raster(mask_path, n.mask.astype(np.float32))
    return vec_path, mask_path


def read_normal_map(path) -> NormalMap:
    """Load ``path`` (a ``.dnfr`` file); the sibling ``.mask.dnfr`` is used when present."""
    path = Path(path)
    vec = read_float_raster(path).astype(np.float64)
    mask_path = path.with_name(path.name[: -len(".dnfr")] + ".mask.dnfr") if path.name.endswith(".dnfr") else None
    mask = None
    if mask_path is not None and mask_path.exists():
        mask = read_float_raster(mask_path)[..., 0] > 0.5
    return NormalMap.from_raw(vec, mask)
