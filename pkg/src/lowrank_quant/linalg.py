"""Deterministic SVD (one-sided Jacobi) and rank-r truncation.

The Jacobi kernel orthogonalizes the columns of the "work" matrix, which is
``a`` itself when m >= n and ``a.T`` otherwise. Strictly tall work matrices
are first reduced to their triangular QR factor (Householder) so rotations act
on length-n vectors. A previous :class:`SvdResult` of a nearby matrix can seed
the rotation (``warm``), which only changes how fast the sweeps converge.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .tensor import Tensor, as_tensor, matmul

log = logging.getLogger(__name__)

CONVERGENCE_TOL = 1e-12
MAX_SWEEPS = 60
_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class SvdResult:
    """``a ~= u @ diag(s) @ v`` with ``u`` (m, k), ``s`` (k,), ``v`` (k, n), k = min(m, n)."""

    u: Tensor
    s: np.ndarray
    v: Tensor
    sweeps: int = 0

    def reconstruct(self) -> Tensor:
        return matmul(self.u * self.s, self.v)


@dataclass(frozen=True)
class LowRankPair:
    l1: Tensor
    l2: Tensor

    def __post_init__(self):
        if self.l1.ndim != 2 or self.l2.ndim != 2 or self.l1.shape[1] != self.l2.shape[0]:
            raise ValueError(f"incompatible factors {self.l1.shape} and {self.l2.shape}")

    @property
    def rank(self) -> int:
        return self.l1.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.l1.shape[0], self.l2.shape[1]

    def product(self) -> Tensor:
        return matmul(self.l1, self.l2)

    @classmethod
    def empty(cls, m: int, n: int) -> "LowRankPair":
        return cls(np.zeros((m, 0)), np.zeros((0, n)))


def _complete_basis(u: np.ndarray, filled: np.ndarray) -> np.ndarray:
    """Fill the columns of ``u`` not marked in ``filled`` with orthonormal vectors
    taken from the standard basis in index order (two-pass Gram-Schmidt)."""
    m, k = u.shape
    basis = [u[:, j] for j in range(k) if filled[j]]
    candidate = 0
    for j in range(k):
        if filled[j]:
            continue
        while True:
            e = np.zeros(m)
            e[candidate] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    e -= np.sum(b * e) * b
            nrm = np.sqrt(np.sum(e * e))
            if nrm > 0.5:
                break
        u[:, j] = e / nrm
        basis.append(u[:, j])
    return u


def _warm_rotation(warm: SvdResult | None, shape: tuple[int, int], transposed: bool):
    """Right rotation of the work matrix implied by a previous result, or None."""
    if warm is None or warm.u.shape[0] != shape[0] or warm.v.shape[1] != shape[1]:
        return None
    return warm.u.T if transposed else warm.v


def svd(a, *, warm: SvdResult | None = None, leading: int | None = None) -> SvdResult:
    """Thin SVD by cyclic one-sided Jacobi rotations.

    Singular values come out descending (stable sort, so ties keep column
    order). Each left singular vector is signed so that its largest-magnitude
    entry (lowest index on ties) is positive, and the matching row of ``v`` is
    flipped with it.

    ``leading`` limits the singular vectors on the side not produced by the
    rotations (``u`` when m >= n, ``v`` otherwise) to the first ``leading``;
    the others are left as zeros. Singular values and the other side are
    always complete, so such a result still works as a ``warm`` start.
    """
    a = as_tensor(a)
    m, n = a.shape
    k = min(m, n)
    transposed = m < n
    work = np.ascontiguousarray(a.T) if transposed else a
    rows, cols = work.shape  # rows >= cols == k

    if k == 0:
        return SvdResult(u=np.zeros((m, 0)), s=np.zeros(0), v=np.zeros((0, n)))

    refl = betas = None
    if rows > cols:
        refl = np.ascontiguousarray(work.T)
        core, betas = _kernels.householder_qr_rows(refl)
    else:
        core = work
    v0t = _warm_rotation(warm, (m, n), transposed)
    if v0t is None:
        vt = np.eye(cols)
        gt = np.ascontiguousarray(core.T)
    else:
        vt = np.array(v0t, order="C", copy=True)
        gt = _kernels.matmul_fixed(vt, np.ascontiguousarray(core.T))

    scale2 = float(np.sum(core * core))
    floor = (rows * _EPS) ** 2 * scale2
    sweeps = _kernels.jacobi_rows(gt, vt, CONVERGENCE_TOL, floor, MAX_SWEEPS)
    if sweeps < 0:
        log.warning("Jacobi SVD stopped after %d sweeps without converging", MAX_SWEEPS)
        sweeps = MAX_SWEEPS

    norms = np.sqrt(np.sum(gt * gt, axis=1))
    order = np.argsort(-norms, kind="stable")
    norms = norms[order]
    gt = gt[order]
    vt = vt[order]

    need = cols if leading is None else max(0, min(int(leading), cols))
    if refl is not None:
        full = np.zeros((need, rows))
        full[:, :cols] = gt[:need]
        _kernels.apply_q_rows(refl, betas, full)
        gt = full
    else:
        gt = gt[:need]

    filled = np.zeros(cols, dtype=bool)
    filled[:need] = norms[:need] > rows * _EPS * norms[0]
    left = np.zeros((rows, cols))
    left[:, filled] = (gt[filled[:need]] / norms[filled, None]).T
    if not filled[:need].all():
        left[:, :need] = _complete_basis(left[:, :need], filled[:need])

    if transposed:
        u, v = np.ascontiguousarray(vt.T), np.ascontiguousarray(left.T)
    else:
        u, v = left, vt
    for j in range(k if transposed else need):
        i = int(np.argmax(np.abs(u[:, j])))
        if u[i, j] < 0:
            u[:, j] = -u[:, j]
            v[j, :] = -v[j, :]
    return SvdResult(u=u, s=norms, v=v, sweeps=sweeps)


def low_rank_from_svd(res: SvdResult, r: int) -> LowRankPair:
    k = res.s.shape[0]
    if not 0 <= r <= k:
        raise ValueError(f"rank {r} out of range [0, {k}]")
    if r == 0:
        return LowRankPair.empty(res.u.shape[0], res.v.shape[1])
    return LowRankPair(l1=res.u[:, :r] * res.s[:r], l2=res.v[:r, :].copy())


def truncated_svd(a, r: int, *, warm: SvdResult | None = None) -> tuple[LowRankPair, Tensor]:
    """Best rank-r approximation ``l1 @ l2`` of ``a`` plus the residual ``a - l1 @ l2``.

    ``l1 = U diag(s)[:, :r]`` and ``l2 = V[:r]``. ``r = 0`` returns empty factors
    and the input as residual.
    """
    pair, residual, _ = truncated_svd_full(a, r, warm=warm)
    return pair, residual


def truncated_svd_full(a, r: int, *, warm: SvdResult | None = None):
    """Like :func:`truncated_svd` but also returns the full :class:`SvdResult`
    (``None`` when ``r == 0``)."""
    a = as_tensor(a)
    m, n = a.shape
    if not 0 <= r <= min(m, n):
        raise ValueError(f"rank {r} out of range [0, {min(m, n)}]")
    if r == 0:
        return LowRankPair.empty(m, n), a.copy(), None
    res = svd(a, warm=warm, leading=r)
    pair = low_rank_from_svd(res, r)
    return pair, a - pair.product(), res
