"""Dense 2-D float64 matrices, deterministic reductions and seeded randomness.

A ``Tensor`` is a plain ``numpy.ndarray`` of dtype float64 with exactly two
dimensions. Everything in the package accepts array-likes and normalizes
them through :func:`as_tensor`.

Reductions avoid BLAS so that results do not depend on thread count:
:func:`matmul` accumulates rank-1 updates over the inner dimension in index
order, and elementwise sums use numpy's fixed pairwise order.
"""

from __future__ import annotations

from typing import Iterable, Literal

import numpy as np

from ._kernels import matmul_fixed

Tensor = np.ndarray

_MASK64 = (1 << 64) - 1


def as_tensor(data, *, allow_nonfinite: bool = False) -> Tensor:
    """Return ``data`` as a C-contiguous 2-D float64 array.

    1-D input is treated as a single row.
    """
    t = np.array(data, dtype=np.float64, order="C", copy=True)
    if t.ndim == 1:
        t = t.reshape(1, -1)
    if t.ndim != 2:
        raise ValueError(f"expected a 2-D tensor, got {t.ndim} dimensions")
    if not allow_nonfinite and not np.all(np.isfinite(t)):
        raise ValueError("tensor contains NaN or Inf")
    return t


def zeros(rows: int, cols: int) -> Tensor:
    return np.zeros((rows, cols), dtype=np.float64)


def eye(n: int) -> Tensor:
    return np.eye(n, dtype=np.float64)


def matmul(a, b) -> Tensor:
    """Matrix product with a fixed accumulation order.

    ``out[i, j]`` is summed left to right over the inner index in float64.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    p, q = a.shape
    q2, s = b.shape
    if q != q2:
        raise ValueError(f"inner dimensions do not match: {a.shape} x {b.shape}")
    return matmul_fixed(np.ascontiguousarray(a), np.ascontiguousarray(b))


def fro_norm(t) -> float:
    t = np.asarray(t, dtype=np.float64)
    return float(np.sqrt(np.sum(t * t)))


def absmax(t, axis: Literal["whole", "per-row", "per-col"] = "whole"):
    """Maximum absolute value over the whole tensor, each row, or each column.

    Empty scopes yield 0.
    """
    t = np.abs(np.asarray(t, dtype=np.float64))
    if axis == "whole":
        return float(t.max()) if t.size else 0.0
    if axis == "per-row":
        return t.max(axis=1) if t.shape[1] else np.zeros(t.shape[0])
    if axis == "per-col":
        return t.max(axis=0) if t.shape[0] else np.zeros(t.shape[1])
    raise ValueError(f"unknown axis {axis!r}")


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Rng:
    """Seeded generator on Philox4x64 (counter-based) with Box-Muller normals.

    The raw 64-bit stream is numpy's ``Philox`` keyed by ``seed``. Uniforms take
    the top 53 bits of one raw word. Normals consume raw words in pairs
    ``(w0, w1)``: ``u1 = (w0 >> 11 + 1) / 2**53`` and ``u2 = (w1 >> 11) / 2**53``
    give ``sqrt(-2 ln u1) * cos(2 pi u2)`` followed by the matching ``sin``
    value. An odd request discards the trailing ``sin`` value.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        self._bitgen = np.random.Philox(key=self.seed)

    def spawn(self, index: int) -> "Rng":
        """Independent child stream whose seed depends only on (seed, index)."""
        return Rng(splitmix64(self.seed ^ splitmix64(int(index) & _MASK64)))

    def raw(self, n: int) -> np.ndarray:
        return self._bitgen.random_raw(n).astype(np.uint64)

    def uniform(self, size: int | tuple[int, ...]) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, size: int | tuple[int, ...]) -> np.ndarray:
        shape = (size,) if isinstance(size, int) else tuple(size)
        n = int(np.prod(shape, dtype=np.int64))
        pairs = (n + 1) // 2
        w = self.raw(2 * pairs)
        u1 = ((w[0::2] >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (w[1::2] >> np.uint64(11)).astype(np.float64) * 2.0**-53
        radius = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        z = np.empty(2 * pairs, dtype=np.float64)
        z[0::2] = radius * np.cos(theta)
        z[1::2] = radius * np.sin(theta)
        return z[:n].reshape(shape)

    def standard_normal(self, rows: int, cols: int) -> Tensor:
        return self.normal((rows, cols))


def synth_outlier_matrix(
    rows: int,
    cols: int,
    outlier_cols: Iterable[int],
    magnitude: float,
    rng: Rng | int,
) -> Tensor:
    """Standard-normal matrix whose ``outlier_cols`` are scaled by ``magnitude``."""
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    idx = sorted(set(int(c) for c in outlier_cols))
    if any(c < 0 or c >= cols for c in idx):
        raise ValueError("outlier column index out of range")
    t = rng.standard_normal(rows, cols)
    if idx:
        t[:, idx] *= float(magnitude)
    return t
