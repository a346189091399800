"""Dense tensor helpers and seeded Gaussian sampling.

Tensors are plain ``numpy.ndarray`` objects stored as float32. Reductions
(matrix products, softmax normalisers) accumulate in float64 and are cast back
to float32 on return. Nothing here broadcasts: shapes are checked explicitly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

DTYPE = np.float32

_U64 = 2**64


def as_tensor(x) -> np.ndarray:
    """Return ``x`` as a C-contiguous float32 array (no copy when already one)."""
    return np.ascontiguousarray(x, dtype=DTYPE)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return out.astype(DTYPE)


def batched_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-batch product of ``a[n, m, k]`` and ``b[n, k, p]``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise DimensionError(f"batched_matmul shape mismatch: {a.shape} x {b.shape}")
    out = np.matmul(a.astype(np.float64, copy=False), b.astype(np.float64, copy=False))
    return out.astype(DTYPE)


def softmax_rows(x: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``x * scale`` with per-row max subtraction."""
    if x.ndim != 2 or x.shape[0] == 0 or x.shape[1] == 0:
        raise DimensionError(f"softmax_rows needs a non-empty 2-D input, got {x.shape}")
    z = x.astype(DTYPE) * DTYPE(scale)
    z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)
    total = z.sum(axis=1, keepdims=True, dtype=np.float64)
    z *= (1.0 / total).astype(DTYPE)
    return z


@dataclass(frozen=True)
class SeededRng:
    """Counter-based random stream keyed by ``(seed, stream)``.

    Backed by the Philox-4x64 generator: the 128-bit key is the pair of
    64-bit words, so every ``(seed, stream)`` pair names an independent
    sequence and nothing is shared between streams.
    """

    seed: int
    stream: int = 0

    def __post_init__(self):
        for name in ("seed", "stream"):
            v = getattr(self, name)
            if not 0 <= v < _U64:
                raise ValueError(f"{name} must be a 64-bit unsigned integer, got {v}")

    def generator(self) -> np.random.Generator:
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))

    def derive(self, tag: str) -> "SeededRng":
        """Same seed, stream id derived from this stream and a text tag."""
        h = hashlib.blake2b(f"{self.stream}:{tag}".encode(), digest_size=8).digest()
        return SeededRng(self.seed, int.from_bytes(h, "little"))


def sample_gaussian(shape, rng: SeededRng) -> np.ndarray:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s <= 0 for s in shape):
        raise DimensionError(f"sample_gaussian needs a non-empty shape, got {shape}")
    return rng.generator().standard_normal(shape, dtype=np.float64).astype(DTYPE)


def checksum(*arrays: np.ndarray) -> str:
    """Hex digest over the raw little-endian float32 bytes of the arrays."""
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a, dtype="<f4")
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]
