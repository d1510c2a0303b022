"""Little-endian binary tensor container.

Layout::

    b"BSSD"            4-byte magic
    u32 L, u32 K, u32 M
    f64 re, f64 im     L*K*M interleaved pairs, C order

Real tensors are stored with zero imaginary parts. Tensors of higher rank
are folded into three axes by the caller (see :func:`save_tensor`).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ._io import atomic_path
from .exceptions import InvalidInputError

MAGIC = b"BSSD"
_HEADER = struct.Struct("<4sIII")


def write_container(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.ndim != 3:
        raise InvalidInputError(f"container holds rank-3 tensors, got shape {a.shape}")
    a = a.astype(np.complex128)
    body = np.empty(a.shape + (2,), dtype="<f8")
    body[..., 0] = a.real
    body[..., 1] = a.imag
    with atomic_path(Path(path)) as tmp:
        with open(tmp, "wb") as fh:
            fh.write(_HEADER.pack(MAGIC, *a.shape))
            fh.write(body.tobytes(order="C"))


def read_container(path, real: bool = False) -> np.ndarray:
    """Read a container; ``real=True`` drops the (expected zero) imaginary part."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise InvalidInputError(f"{path}: truncated header")
    magic, n_l, n_k, n_m = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise InvalidInputError(f"{path}: bad magic {magic!r}")
    count = n_l * n_k * n_m
    expected = _HEADER.size + 16 * count
    if len(raw) != expected:
        raise InvalidInputError(f"{path}: expected {expected} bytes, found {len(raw)}")
    body = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(n_l, n_k, n_m, 2)
    if real:
        return body[..., 0].astype(np.float64)
    return body[..., 0] + 1j * body[..., 1]


def save_tensor(path, array: np.ndarray) -> None:
    """Store a rank-3 or rank-4 tensor; rank 4 ``(A, B, M, M)`` folds to ``(A, B, M*M)``."""
    a = np.asarray(array)
    if a.ndim == 4:
        if a.shape[2] != a.shape[3]:
            raise InvalidInputError("rank-4 tensors must have square trailing axes")
        a = a.reshape(a.shape[0], a.shape[1], -1)
    elif a.ndim == 2:
        a = a[None]
    write_container(path, a)


def load_tensor(path, rank: int = 3, real: bool = False) -> np.ndarray:
    a = read_container(path, real=real)
    if rank == 4:
        m = int(round(np.sqrt(a.shape[2])))
        if m * m != a.shape[2]:
            raise InvalidInputError(f"{path}: last axis {a.shape[2]} is not a square")
        return a.reshape(a.shape[0], a.shape[1], m, m)
    if rank == 2:
        if a.shape[0] != 1:
            raise InvalidInputError(f"{path}: holds {a.shape[0]} slabs, not a matrix")
        return a[0]
    return a
