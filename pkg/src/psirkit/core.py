"""Array conventions, centered orthonormal FFTs and the CXF binary array format.

Images are plain numpy arrays:

* real image: ``(rows, cols)`` float
* complex image: ``(rows, cols)`` complex
* multi-coil k-space / coil maps: ``(coils, rows, cols)`` complex, coil slowest

Rows are the phase-encode direction, so sampling masks act on axis ``-2``.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "fft2c",
    "ifft2c",
    "as_complex_image",
    "as_real_image",
    "as_multicoil",
    "SamplingMask",
    "uniform_mask",
    "write_array",
    "read_array",
    "CxfError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedPayloadError",
    "DimensionOverflowError",
    "KIND_REAL",
    "KIND_COMPLEX",
    "KIND_MULTICOIL",
]

MAGIC = b"PSIR"
VERSION = 1
KIND_REAL = 0
KIND_COMPLEX = 1
KIND_MULTICOIL = 2
# 2**40 samples is far beyond anything a desk-scale run produces
MAX_ELEMENTS = 1 << 40

_HEADER = struct.Struct("<4sIB3xI")


class CxfError(ValueError):
    """Base class for malformed CXF files."""


class BadMagicError(CxfError):
    pass


class VersionMismatchError(CxfError):
    pass


class TruncatedPayloadError(CxfError):
    pass


class DimensionOverflowError(CxfError):
    pass


def _check_finite(arr, what):
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{what} contains non-finite samples")


def as_complex_image(img, name="image"):
    """Validate a 2D image and return it as complex128."""
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    arr = arr.astype(np.complex128, copy=False)
    _check_finite(arr, name)
    return arr


def as_real_image(img, name="image"):
    arr = np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2D, got shape {arr.shape}")
    if np.iscomplexobj(arr):
        raise ValueError(f"{name} must be real")
    arr = arr.astype(np.float64, copy=False)
    _check_finite(arr, name)
    return arr


def as_multicoil(k, name="k-space"):
    arr = np.asarray(k)
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (coils, rows, cols), got shape {arr.shape}")
    arr = arr.astype(np.complex128, copy=False)
    _check_finite(arr, name)
    return arr


def fft2c(img):
    """Centered, orthonormal 2D FFT over the last two axes.

    DC ends up at index ``(rows // 2, cols // 2)``. Leading axes (coils) are
    transformed independently.
    """
    x = np.asarray(img)
    _check_finite(x, "fft2c input")
    x = np.fft.ifftshift(x, axes=(-2, -1))
    x = np.fft.fft2(x, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(x, axes=(-2, -1))


def ifft2c(k):
    """Inverse of :func:`fft2c`."""
    x = np.asarray(k)
    _check_finite(x, "ifft2c input")
    x = np.fft.ifftshift(x, axes=(-2, -1))
    x = np.fft.ifft2(x, axes=(-2, -1), norm="ortho")
    return np.fft.fftshift(x, axes=(-2, -1))


def _kind_of(arr):
    if not np.iscomplexobj(arr):
        return KIND_REAL
    return KIND_MULTICOIL if arr.ndim == 3 else KIND_COMPLEX


def write_array(path, arr, kind=None):
    """Write ``arr`` as a CXF file.

    Samples are stored as little-endian float32 (complex interleaved re, im),
    so float64 input is rounded once on write. ``kind`` is inferred from the
    dtype and rank unless given.
    """
    arr = np.asarray(arr)
    if kind is None:
        kind = _kind_of(arr)
    if kind not in (KIND_REAL, KIND_COMPLEX, KIND_MULTICOIL):
        raise ValueError(f"unknown CXF kind {kind}")
    if kind == KIND_MULTICOIL and arr.ndim != 3:
        raise ValueError("multicoil arrays must be (coils, rows, cols)")
    if kind == KIND_REAL and np.iscomplexobj(arr):
        raise ValueError("cannot store complex data as kind real")
    if arr.ndim == 0:
        raise ValueError("scalars are not CXF arrays")
    _check_finite(arr, "array")

    if kind == KIND_REAL:
        payload = np.ascontiguousarray(arr, dtype="<f4")
    else:
        c = np.ascontiguousarray(arr, dtype=np.complex64)
        payload = c.view(np.float32).astype("<f4", copy=False)

    header = _HEADER.pack(MAGIC, VERSION, kind, arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(dims)
        fh.write(payload.tobytes(order="C"))


def read_array(path):
    """Read a CXF file; returns float32 (real) or complex64 arrays."""
    data = Path(path).read_bytes()
    if len(data) >= 4 and data[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < _HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated")
    magic, version, kind, ndim = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, expected {VERSION}")
    if kind not in (KIND_REAL, KIND_COMPLEX, KIND_MULTICOIL):
        raise CxfError(f"{path}: unknown kind {kind}")
    if ndim == 0 or ndim > 8:
        raise DimensionOverflowError(f"{path}: unsupported ndim {ndim}")
    off = _HEADER.size
    if len(data) < off + 8 * ndim:
        raise TruncatedPayloadError(f"{path}: dimension block truncated")
    dims = struct.unpack_from(f"<{ndim}Q", data, off)
    off += 8 * ndim

    n = 1
    for d in dims:
        n *= d
        if n > MAX_ELEMENTS:
            raise DimensionOverflowError(f"{path}: dims {dims} overflow")
    if kind == KIND_MULTICOIL and ndim != 3:
        raise CxfError(f"{path}: multicoil kind needs 3 dims, got {ndim}")

    n_floats = n if kind == KIND_REAL else 2 * n
    expected = off + 4 * n_floats
    if len(data) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {(len(data) - off) // 4} floats, header needs {n_floats}"
        )
    if len(data) > expected:
        raise CxfError(f"{path}: {len(data) - expected} trailing bytes")

    flat = np.frombuffer(data, dtype="<f4", count=n_floats, offset=off).astype(np.float32)
    if kind == KIND_REAL:
        return flat.reshape(dims)
    return flat.view(np.complex64).reshape(dims)


@dataclass(frozen=True, eq=False)
class SamplingMask:
    """Phase-encode (row) sampling pattern.

    ``sampled`` is a boolean vector over rows; ``acs_lines`` contiguous rows
    around ``rows // 2`` are guaranteed to be sampled.
    """

    sampled: np.ndarray
    acceleration: int = 1
    acs_lines: int = 0

    def __post_init__(self):
        s = np.array(self.sampled, dtype=bool)
        if s.ndim != 1:
            raise ValueError("sampled must be a 1D boolean vector over rows")
        if not s.any():
            raise ValueError("mask samples no rows")
        if self.acceleration < 1:
            raise ValueError("acceleration must be a positive integer")
        if not 0 <= self.acs_lines <= s.size:
            raise ValueError("acs_lines out of range")
        if not s[self.acs_slice(s.size)].all():
            raise ValueError("ACS rows must all be sampled")
        s.setflags(write=False)
        object.__setattr__(self, "sampled", s)

    @property
    def rows(self):
        return self.sampled.size

    def acs_slice(self, rows=None):
        rows = self.rows if rows is None else rows
        start = rows // 2 - self.acs_lines // 2
        return slice(start, start + self.acs_lines)

    def as_kspace_weights(self):
        """``(rows, 1)`` float array broadcastable over ``(coils, rows, cols)``."""
        return self.sampled.astype(np.float64)[:, None]

    def __eq__(self, other):
        if not isinstance(other, SamplingMask):
            return NotImplemented
        return (
            self.acceleration == other.acceleration
            and self.acs_lines == other.acs_lines
            and np.array_equal(self.sampled, other.sampled)
        )


def uniform_mask(rows, acceleration, acs_lines=24):
    """Every ``acceleration``-th row (the center row always included) plus ACS."""
    if acceleration < 1:
        raise ValueError("acceleration must be >= 1")
    acs_lines = min(acs_lines, rows)
    center = rows // 2
    idx = np.arange(rows)
    sampled = (idx - center) % acceleration == 0
    start = center - acs_lines // 2
    sampled[start : start + acs_lines] = True
    return SamplingMask(sampled, int(acceleration), int(acs_lines))
