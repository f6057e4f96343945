"""Compiled inner loops for the Jacobi SVD.

All arrays are row-major and every "vector" being processed is a contiguous
row. Loop orders are fixed. The SVD kernels allow the compiler to vectorize
dot products (``fastmath`` reassociation), so their results are reproducible
for a given build and machine; :func:`matmul_fixed` keeps strict
left-to-right accumulation.
"""

import numpy as np
from numba import njit

_FAST = {"reassoc", "contract"}


@njit(cache=True, fastmath=_FAST)
def jacobi_rows(g, vt, tol, floor, max_sweeps):
    """Cyclic one-sided Jacobi on the rows of ``g``.

    Pairs (p, q) are visited in row-cyclic order p < q. Every rotation applied to
    ``g`` is applied to ``vt`` too. Returns the number of sweeps performed, or
    ``-1`` if rows were still being rotated after ``max_sweeps``.
    """
    n, m = g.shape
    k = vt.shape[1]
    norms = np.empty(n)
    for i in range(n):
        acc = 0.0
        for j in range(m):
            acc += g[i, j] * g[i, j]
        norms[i] = acc
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                a = norms[p]
                b = norms[q]
                if a <= floor or b <= floor:
                    continue
                gam = 0.0
                for j in range(m):
                    gam += g[p, j] * g[q, j]
                if abs(gam) <= tol * np.sqrt(a * b):
                    continue
                rotated = True
                zeta = (b - a) / (2.0 * gam)
                sgn = 1.0 if zeta >= 0.0 else -1.0
                t = sgn / (abs(zeta) + np.hypot(1.0, zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                na = 0.0
                nb = 0.0
                for j in range(m):
                    x = g[p, j]
                    y = g[q, j]
                    xn = c * x - s * y
                    yn = s * x + c * y
                    g[p, j] = xn
                    g[q, j] = yn
                    na += xn * xn
                    nb += yn * yn
                norms[p] = na
                norms[q] = nb
                for j in range(k):
                    x = vt[p, j]
                    y = vt[q, j]
                    vt[p, j] = c * x - s * y
                    vt[q, j] = s * x + c * y
        if not rotated:
            return sweep + 1
    return -1


@njit(cache=True, fastmath=_FAST)
def householder_qr_rows(at):
    """Householder QR of ``a = at.T`` (m >= n), with ``at`` holding columns as rows.

    Overwrites ``at`` with the reflector vectors (row j, entries j..m-1) and
    returns ``(r, betas)`` where ``r`` is the n x n upper-triangular factor.
    """
    n, m = at.shape
    r = np.zeros((n, n))
    betas = np.zeros(n)
    for j in range(n):
        normx = 0.0
        for i in range(j, m):
            normx += at[j, i] * at[j, i]
        normx = np.sqrt(normx)
        if normx == 0.0:
            for c in range(j + 1, n):
                r[j, c] = at[c, j]
            for i in range(j, m):
                at[j, i] = 0.0
            continue
        alpha = -normx if at[j, j] >= 0.0 else normx
        at[j, j] -= alpha
        vnorm2 = 0.0
        for i in range(j, m):
            vnorm2 += at[j, i] * at[j, i]
        beta = 2.0 / vnorm2
        betas[j] = beta
        r[j, j] = alpha
        for c in range(j + 1, n):
            d = 0.0
            for i in range(j, m):
                d += at[j, i] * at[c, i]
            d *= beta
            for i in range(j, m):
                at[c, i] -= d * at[j, i]
            r[j, c] = at[c, j]
    return r, betas


@njit(cache=True, fastmath=_FAST)
def apply_q_rows(refl, betas, xt):
    """Overwrite rows of ``xt`` (each a length-m vector) with ``Q @ row``."""
    n, m = refl.shape
    cols = xt.shape[0]
    for j in range(n - 1, -1, -1):
        beta = betas[j]
        if beta == 0.0:
            continue
        for c in range(cols):
            d = 0.0
            for i in range(j, m):
                d += refl[j, i] * xt[c, i]
            d *= beta
            for i in range(j, m):
                xt[c, i] -= d * refl[j, i]


@njit(cache=True)
def matmul_fixed(a, b):
    """``a @ b`` with each output summed left to right over the inner index."""
    p, q = a.shape
    s = b.shape[1]
    out = np.zeros((p, s))
    for i in range(p):
        for k in range(q):
            aik = a[i, k]
            for j in range(s):
                out[i, j] += aik * b[k, j]
    return out
