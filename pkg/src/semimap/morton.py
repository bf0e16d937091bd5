"""Morton (z-order) codes for signed 3D voxel coordinates.

Coordinates in (-2^20, 2^20) are offset to unsigned 21-bit integers and
bit-interleaved into a 63-bit code, so codes fit a uint64 and stay injective
over the valid box. Hash-table keys elsewhere are (level, code) pairs.
"""

from __future__ import annotations

import numpy as np

COORD_LIMIT = 1 << 20  # exclusive bound on |ix|,|iy|,|iz|
_OFFSET = np.uint64(1 << 20)

_U = np.uint64
_MASKS_SPREAD = (
    _U(0x1F00000000FFFF),
    _U(0x1F0000FF0000FF),
    _U(0x100F00F00F00F00F),
    _U(0x10C30C30C30C30C3),
    _U(0x1249249249249249),
)
_SHIFTS = (_U(32), _U(16), _U(8), _U(4), _U(2))


def _spread_bits(v: np.ndarray) -> np.ndarray:
    """Insert two zero bits between each of the low 21 bits."""
    v = v & _U(0x1FFFFF)
    for shift, mask in zip(_SHIFTS, _MASKS_SPREAD):
        v = (v | (v << shift)) & mask
    return v


def _compact_bits(v: np.ndarray) -> np.ndarray:
    """Inverse of _spread_bits."""
    v = v & _U(0x1249249249249249)
    v = (v | (v >> _U(2))) & _U(0x10C30C30C30C30C3)
    v = (v | (v >> _U(4))) & _U(0x100F00F00F00F00F)
    v = (v | (v >> _U(8))) & _U(0x1F0000FF0000FF)
    v = (v | (v >> _U(16))) & _U(0x1F00000000FFFF)
    v = (v | (v >> _U(32))) & _U(0x1FFFFF)
    return v


def encode(ix, iy, iz) -> np.uint64 | np.ndarray:
    """Interleave signed coordinates into a Morton code.

    Accepts scalars or equal-shaped integer arrays; raises ValueError if any
    coordinate falls outside (-2^20, 2^20).
    """
    ix = np.asarray(ix, dtype=np.int64)
    iy = np.asarray(iy, dtype=np.int64)
    iz = np.asarray(iz, dtype=np.int64)
    for name, c in (("ix", ix), ("iy", iy), ("iz", iz)):
        if np.any(np.abs(c) >= COORD_LIMIT):
            raise ValueError(f"{name} out of Morton range (-2^20, 2^20)")
    x = (ix + COORD_LIMIT).astype(np.uint64)
    y = (iy + COORD_LIMIT).astype(np.uint64)
    z = (iz + COORD_LIMIT).astype(np.uint64)
    code = _spread_bits(x) | (_spread_bits(y) << _U(1)) | (_spread_bits(z) << _U(2))
    return code if code.ndim else code[()]


def decode(code) -> tuple:
    """Recover signed (ix, iy, iz) from a Morton code produced by encode."""
    code = np.asarray(code, dtype=np.uint64)
    ix = _compact_bits(code).astype(np.int64) - COORD_LIMIT
    iy = _compact_bits(code >> _U(1)).astype(np.int64) - COORD_LIMIT
    iz = _compact_bits(code >> _U(2)).astype(np.int64) - COORD_LIMIT
    if code.ndim:
        return ix, iy, iz
    return int(ix), int(iy), int(iz)


def encode_points(ijk: np.ndarray) -> np.ndarray:
    """Encode an (n, 3) integer coordinate array to (n,) uint64 codes."""
    ijk = np.asarray(ijk, dtype=np.int64)
    return encode(ijk[..., 0], ijk[..., 1], ijk[..., 2])
