"""Raw-domain value types and per-frame transforms.

Mosaics are 2-D float arrays in RGGB layout. Packed raw images are arrays of
shape ``(4, H/2, W/2)`` holding the R, G1, G2, B planes (a leading batch axis
is allowed wherever noted).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, FormatError, ParameterError

DEFAULT_GAMMA = 1 / 2.2
DEFAULT_MU = 5000.0
RAW_MAGIC = b"BRK1"

# (row, col) offset of each packed plane inside a 2x2 RGGB cell
CFA_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class ExposureMeta:
    """Exposure bookkeeping for frame ``index`` (1-based) of a bracket."""

    index: int
    ratio: float = 4.0
    base_exposure: float = 1.0
    bit_depth: int = 10

    def __post_init__(self):
        if self.ratio <= 1:
            raise ParameterError(f"exposure ratio must exceed 1, got {self.ratio}")
        if self.index < 1:
            raise ParameterError(f"frame index is 1-based, got {self.index}")

    @property
    def exposure(self) -> float:
        return self.base_exposure * self.ratio ** (self.index - 1)

    @property
    def divisor(self) -> float:
        """Exposure-time ratio to the shortest frame."""
        return float(self.ratio ** (self.index - 1))


def pack_bayer(mosaic: np.ndarray) -> np.ndarray:
    """Rearrange an RGGB mosaic ``(..., H, W)`` into planes ``(..., 4, H/2, W/2)``."""
    mosaic = np.asarray(mosaic)
    h, w = mosaic.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"mosaic dimensions must be even, got {h}x{w}")
    planes = [mosaic[..., dy::2, dx::2] for dy, dx in CFA_OFFSETS]
    return np.stack(planes, axis=-3)


def unpack_bayer(packed: np.ndarray) -> np.ndarray:
    """Inverse of :func:`pack_bayer`."""
    packed = np.asarray(packed)
    if packed.ndim < 3 or packed.shape[-3] != 4:
        raise DimensionError(f"expected 4 planes, got shape {packed.shape}")
    h, w = packed.shape[-2:]
    out = np.empty(packed.shape[:-3] + (2 * h, 2 * w), dtype=packed.dtype)
    for k, (dy, dx) in enumerate(CFA_OFFSETS):
        out[..., dy::2, dx::2] = packed[..., k, :, :]
    return out


def unpack_planes(planes) -> np.ndarray:
    """Unpack a sequence of 4 separately stored planes, checking their shapes."""
    planes = [np.asarray(p) for p in planes]
    if len(planes) != 4:
        raise DimensionError(f"expected 4 planes, got {len(planes)}")
    if len({p.shape for p in planes}) != 1:
        raise DimensionError("plane shapes differ: " + ", ".join(str(p.shape) for p in planes))
    return unpack_bayer(np.stack(planes))


def condition_frame(packed: np.ndarray, meta: ExposureMeta, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    """Exposure-normalize packed planes and append their gamma-compressed copy.

    Returns 8 planes along axis -3: ``x / S**(i-1)`` followed by
    ``max(x / S**(i-1), 0) ** gamma``.
    """
    packed = np.asarray(packed)
    if packed.shape[-3] != 4:
        raise DimensionError(f"expected 4 planes, got shape {packed.shape}")
    divisor = meta.divisor
    norm = packed if divisor == 1 else packed / packed.dtype.type(divisor)
    gam = np.power(np.maximum(norm, 0), gamma).astype(norm.dtype)
    return np.concatenate([norm, gam], axis=-3)


def tonemap(x, mu: float = DEFAULT_MU):
    """mu-law compression ``log(1 + mu*x) / log(1 + mu)``; negatives clamp to 0."""
    if mu <= 0:
        raise ParameterError(f"mu must be positive, got {mu}")
    x = np.maximum(np.asarray(x), 0)
    return np.log1p(mu * x) / np.log1p(mu)


def inverse_tonemap(y, mu: float = DEFAULT_MU):
    y = np.asarray(y)
    if mu <= 0:
        raise ParameterError(f"mu must be positive, got {mu}")
    if np.any(y < 0) or np.any(y > 1):
        raise ParameterError("inverse_tonemap expects values in [0, 1]")
    return np.expm1(y * np.log1p(mu)) / mu


def _check_bits(bits: int) -> int:
    if not 1 <= int(bits) <= 16:
        raise ParameterError(f"bit depth must be within [1, 16], got {bits}")
    return (1 << int(bits)) - 1


def quantize(x, bits: int = 10) -> np.ndarray:
    """Map ``[0, 1]`` to integers ``0 .. 2**bits - 1``, rounding half away from zero."""
    top = _check_bits(bits)
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.floor(x * top + 0.5).astype(np.uint16 if bits <= 16 else np.uint32)


def dequantize(q, bits: int = 10, dtype=np.float32) -> np.ndarray:
    top = _check_bits(bits)
    return (np.asarray(q, dtype=np.float64) / top).astype(dtype)


def write_raw(path, planes: np.ndarray) -> None:
    """Write planes ``(P, H, W)`` as little-endian float32 behind a 16-byte header."""
    planes = np.asarray(planes)
    if planes.ndim != 3:
        raise DimensionError(f"expected (planes, H, W), got {planes.shape}")
    p, h, w = planes.shape
    header = RAW_MAGIC + struct.pack("<III", p, h, w)
    Path(path).write_bytes(header + planes.astype("<f4").tobytes())


def read_raw(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != RAW_MAGIC:
        raise FormatError(f"{path}: not a BRK1 raw file")
    p, h, w = struct.unpack("<III", data[4:16])
    if len(data) != 16 + 4 * p * h * w:
        raise FormatError(f"{path}: payload size does not match header {p}x{h}x{w}")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(p, h, w).astype(np.float32)
