"""Binary mask and steering files.

Both formats are a 4-byte magic, little-endian ``u32`` header fields and a
raw little-endian float32 payload::

    BKM1 | version | T | K | T*K float32 (row-major by frame)
    BKH1 | version | K | M | K*M complex64 (re, im interleaved)
"""

from __future__ import annotations

import logging
import struct

import numpy as np

from .errors import FormatError

__all__ = ["read_mask", "write_mask", "read_steering", "write_steering",
           "encode_mask", "decode_mask", "encode_steering", "decode_steering"]

log = logging.getLogger(__name__)

MASK_MAGIC = b"BKM1"
STEERING_MAGIC = b"BKH1"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
NORM_WARN = 1e-3
NORM_TOL = 1e-6


def _parse_header(buf: bytes, magic: bytes, itemsize: int):
    if len(buf) < _HEADER.size:
        raise FormatError(f"file too short for a {magic.decode()} header ({len(buf)} bytes)")
    got, version, a, b = _HEADER.unpack_from(buf)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}")
    want = _HEADER.size + a * b * itemsize
    if len(buf) < want:
        raise FormatError(f"truncated payload: {len(buf) - _HEADER.size} of "
                          f"{want - _HEADER.size} bytes")
    if len(buf) > want:
        raise FormatError(f"{len(buf) - want} trailing bytes after payload")
    return a, b


def encode_mask(mask) -> bytes:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise FormatError(f"mask must be (T, K), got shape {m.shape}")
    if np.any(np.isnan(m)):
        raise FormatError("mask contains NaN")
    data = np.ascontiguousarray(m, dtype="<f4")
    return _HEADER.pack(MASK_MAGIC, VERSION, *m.shape) + data.tobytes()


def decode_mask(buf: bytes) -> np.ndarray:
    t, k = _parse_header(buf, MASK_MAGIC, 4)
    m = np.frombuffer(buf, dtype="<f4", offset=_HEADER.size).reshape(t, k)
    if np.any(np.isnan(m)):
        raise FormatError("mask contains NaN")
    out = m.astype(np.float32)
    bad = (out < 0) | (out > 1)
    if np.any(bad):
        log.warning("clamping %d mask values outside [0, 1]", int(bad.sum()))
        np.clip(out, 0.0, 1.0, out=out)
    return out


def encode_steering(h) -> bytes:
    h = np.asarray(h)
    if h.ndim != 2:
        raise FormatError(f"steering field must be (K, M), got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise FormatError("steering field contains non-finite values")
    data = np.ascontiguousarray(h, dtype="<c8")
    return _HEADER.pack(STEERING_MAGIC, VERSION, *h.shape) + data.tobytes()


def decode_steering(buf: bytes) -> np.ndarray:
    """Decode and enforce unit norm per bin.

    Bins already within ``1e-6`` of unit norm are returned untouched so
    float32 data round-trips bit-identically; others are re-normalized, with
    a warning beyond ``1e-3``.
    """
    k, m = _parse_header(buf, STEERING_MAGIC, 8)
    h = np.frombuffer(buf, dtype="<c8", offset=_HEADER.size).reshape(k, m).astype(np.complex64)
    if not np.all(np.isfinite(h.view(np.float32))):
        raise FormatError("steering field contains NaN or Inf")
    nrm = np.linalg.norm(h.astype(complex), axis=1)
    if np.any(nrm == 0):
        raise FormatError("steering field has a zero-norm bin")
    off = np.abs(nrm - 1.0)
    if np.any(off > NORM_WARN):
        log.warning("re-normalizing %d steering bins off unit norm by > %g",
                    int(np.sum(off > NORM_WARN)), NORM_WARN)
    fix = off > NORM_TOL
    h[fix] = (h[fix].astype(complex) / nrm[fix, None]).astype(np.complex64)
    return h


def _read(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _write(path, buf: bytes) -> None:
    with open(path, "wb") as fh:
        fh.write(buf)


def read_mask(path) -> np.ndarray:
    return decode_mask(_read(path))


def write_mask(mask, path) -> None:
    _write(path, encode_mask(mask))


def read_steering(path) -> np.ndarray:
    return decode_steering(_read(path))


def write_steering(h, path) -> None:
    _write(path, encode_steering(h))
