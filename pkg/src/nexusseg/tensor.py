"""Dense arrays, seeded randomness and the NXT1 tensor wire format.

Tensors are plain ``numpy.ndarray`` objects in float64, row-major.  The
random generator is numpy's PCG64 (``numpy.random.Generator``); child streams
are derived with ``SeedSequence.spawn`` so parallel work never shares state.
"""
import io
import struct

import numpy as np

from .errors import ParameterError, ShapeError, VersionError

DTYPE = np.float64
TENSOR_MAGIC = b"NXT1"

_OPS = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
}


def _check_shape(shape):
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("tensor rank must be at least 1")
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be positive, got {shape}")
    return shape


def new_rng(seed):
    """PCG64 generator for a 64-bit seed."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def child_rngs(rng, n):
    return rng.spawn(n)


def tensor_new(shape, fill=0.0):
    shape = _check_shape(shape)
    return np.full(shape, fill, dtype=DTYPE)


def gaussian_fill(t, rng, std):
    """Return a tensor shaped like ``t`` with i.i.d. N(0, std^2) entries."""
    if not std > 0:
        raise ParameterError(f"std must be positive, got {std}")
    shape = t.shape if hasattr(t, "shape") else _check_shape(t)
    return rng.normal(0.0, std, size=shape).astype(DTYPE, copy=False)


def elementwise(a, b, op):
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    try:
        fn = _OPS[op]
    except KeyError:
        raise ParameterError(f"unknown op {op!r}") from None
    return fn(a, b)


def flat_index(coord, shape):
    """Row-major flat offset of ``coord``."""
    idx = 0
    for c, s in zip(coord, shape):
        if not 0 <= c < s:
            raise ShapeError(f"coordinate {tuple(coord)} outside {tuple(shape)}")
        idx = idx * s + c
    return idx


def coord_of(index, shape):
    """Inverse of :func:`flat_index`."""
    total = int(np.prod(shape))
    if not 0 <= index < total:
        raise ShapeError(f"flat index {index} outside {tuple(shape)}")
    coord = []
    for s in reversed(shape):
        coord.append(index % s)
        index //= s
    return tuple(reversed(coord))


def write_tensor(fh, t):
    t = np.ascontiguousarray(t, dtype="<f8")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", t.ndim))
    fh.write(struct.pack(f"<{t.ndim}Q", *t.shape))
    fh.write(t.tobytes(order="C"))


def read_tensor(fh):
    """Read one NXT1 tensor; returns None at a clean end of stream."""
    magic = fh.read(4)
    if not magic:
        return None
    if magic != TENSOR_MAGIC:
        raise VersionError(f"bad tensor magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
    count = int(np.prod(shape))
    payload = fh.read(8 * count)
    if len(payload) != 8 * count:
        raise VersionError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(DTYPE)


def tensor_to_bytes(t):
    buf = io.BytesIO()
    write_tensor(buf, t)
    return buf.getvalue()


def tensor_from_bytes(data):
    return read_tensor(io.BytesIO(data))
