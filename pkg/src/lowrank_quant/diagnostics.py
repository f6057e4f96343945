"""Layer error reports, checks of the two error bounds, spectra and the
six-scheme comparison ladder.

The layer error of a scheme is ``E = ||X W - out||_F`` on the calibration
batch, where ``out`` is what the quantized layer computes. Each report also
carries the four norms of the error decomposition bound for the operands the
scheme actually quantizes:

=============  =====================  ==========================
scheme         activation operand     weight operand
=============  =====================  ==========================
naive-RTN      X                      W
smooth-only    X_hat                  W_hat
svd-only       X                      R = W - L1 L2
lorc           X                      W (error: W - Q(W) - L1 L2)
svdquant-*     X_hat                  R = W_hat - L1 L2
=============  =====================  ==========================
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import pipeline
from .linalg import svd, truncated_svd
from .pipeline import QuantizedLinear, apply_smoothing, lorc_baseline
from .quant import (
    FP4_E2M1,
    PER_TOKEN,
    QuantConfig,
    QuantDType,
    ScaleDType,
    fake_quant,
    fake_quant_act,
    fake_quant_weight,
)
from .tensor import Rng, as_tensor, fro_norm, matmul

SCHEMES = ("naive-RTN", "smooth-only", "svd-only", "lorc", "svdquant-RTN", "svdquant-GPTQ")


@dataclass(frozen=True)
class ErrorReport:
    scheme: str
    E: float
    relative_E: float
    x_norm: float
    w_err_norm: float
    x_err_norm: float
    w_norm: float

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def bound(self) -> float:
        return self.x_norm * self.w_err_norm + self.x_err_norm * (self.w_norm + self.w_err_norm)


def _relative(e: float, ref: float) -> float:
    if ref > 0:
        return e / ref
    return 0.0 if e == 0 else math.inf


def layer_error(x, w, act_cfg: QuantConfig | None, weight_cfg: QuantConfig | None, *, scheme: str = "naive-RTN") -> ErrorReport:
    """``E(X, W) = ||X W - Q(X) Q(W)||_F`` with round-to-nearest fake quantization."""
    x, w = as_tensor(x), as_tensor(w)
    qx = fake_quant_act(x, act_cfg)
    qw = fake_quant_weight(w, weight_cfg)
    xw = matmul(x, w)
    e = fro_norm(xw - matmul(qx, qw))
    return ErrorReport(
        scheme=scheme,
        E=e,
        relative_E=_relative(e, fro_norm(xw)),
        x_norm=fro_norm(x),
        w_err_norm=fro_norm(w - qw),
        x_err_norm=fro_norm(x - qx),
        w_norm=fro_norm(w),
    )


def layer_report(layer: QuantizedLinear, x, w, scheme: str) -> ErrorReport:
    """Report for a smoothed low-rank layer; the bound terms use ``X_hat`` and ``R``."""
    x, w = as_tensor(x), as_tensor(w)
    x_hat, w_hat = apply_smoothing(x, w, layer.smoothing)
    resid = w_hat - layer.branch.product()
    q_resid = layer.residual_q.dequantize()
    qx = fake_quant_act(x_hat, layer.act_cfg)
    e = pipeline.calibration_error(layer, x, w)
    return ErrorReport(
        scheme=scheme,
        E=e,
        relative_E=_relative(e, fro_norm(matmul(x, w))),
        x_norm=fro_norm(x_hat),
        w_err_norm=fro_norm(resid - q_resid),
        x_err_norm=fro_norm(x_hat - qx),
        w_norm=fro_norm(resid),
    )


def lorc_report(x, w, rank: int, weight_cfg: QuantConfig, act_cfg: QuantConfig | None) -> ErrorReport:
    """LoRC layer: ``Q(X) Q(W) + X L1 L2`` with the 16-bit branch fit to ``W - Q(W)``."""
    x, w = as_tensor(x), as_tensor(w)
    pair, qw = lorc_baseline(w, rank, weight_cfg)
    deq = qw.dequantize()
    qx = fake_quant_act(x, act_cfg)
    xw = matmul(x, w)
    out = matmul(qx, deq) + matmul(matmul(x, pair.l1), pair.l2)
    e = fro_norm(xw - out)
    return ErrorReport(
        scheme="lorc",
        E=e,
        relative_E=_relative(e, fro_norm(xw)),
        x_norm=fro_norm(x),
        w_err_norm=fro_norm(w - deq - pair.product()),
        x_err_norm=fro_norm(x - qx),
        w_norm=fro_norm(w),
    )


# ---------------------------------------------------------------------------
# error bounds


@dataclass(frozen=True)
class BoundCheck:
    lhs: float
    rhs: float
    holds: bool


def check_layer_bound(x, w, act_cfg: QuantConfig | None, weight_cfg: QuantConfig | None) -> BoundCheck:
    """``E(X, W) <= ||X|| ||W - Q(W)|| + ||X - Q(X)|| (||W|| + ||W - Q(W)||)``
    with a relative slack of 1e-9."""
    rep = layer_error(x, w, act_cfg, weight_cfg)
    rhs = rep.bound
    return BoundCheck(lhs=rep.E, rhs=rhs, holds=rep.E <= rhs + 1e-9 * rhs)


@dataclass(frozen=True)
class ResidualBoundCheck:
    size: int
    q_max: float
    trials: int
    c: float
    mean_quant_err: float
    bound: float
    se_rel: float
    holds: bool
    mean_max: float
    mean_fro: float
    regularity_holds: bool


def gaussian_constant(size: int, log: str = "e") -> float:
    """``c = sqrt(log(size) * pi / size)`` for Gaussian tensors."""
    if size < 2:
        raise ValueError("size must be at least 2")
    logs = {"e": math.log, "2": math.log2, "10": math.log10}
    if log not in logs:
        raise ValueError(f"unknown log base {log!r}")
    return math.sqrt(logs[log](size) * math.pi / size)


def dtype_for_qmax(q_max: float) -> QuantDType:
    """FP4 E2M1 for 6, otherwise the integer type with ``2**(k-1) - 1 == q_max``."""
    if q_max == 6:
        return FP4_E2M1
    k = math.log2(q_max + 1) + 1
    if k != int(k) or not 2 <= k <= 8:
        raise ValueError(f"no lattice with q_max = {q_max}")
    return QuantDType.int_k(int(k))


def _mean_se(v: np.ndarray) -> tuple[float, float]:
    mean = float(np.mean(v))
    se = float(np.std(v, ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return mean, se


def check_residual_bound(
    size: int,
    q_max: float,
    trials: int,
    rng: Rng | int = 0,
    *,
    dist: str = "gaussian",
    log: str = "e",
    batch: int = 100,
) -> ResidualBoundCheck:
    """Monte-Carlo check of ``E||R - Q(R)|| <= c sqrt(size) / q_max * E||R||``.

    Each trial draws a standard-normal tensor of ``size`` elements and quantizes
    it with one unrounded scale ``max|R| / q_max``. Trial ``i`` uses the child
    stream ``rng.spawn(i)``, so the estimate does not depend on batching.
    The check passes when ``lhs <= rhs * (1 + 3 * se)``, ``se`` being the
    relative standard error of the left side plus that of ``E||R||``.
    """
    if dist != "gaussian":
        raise ValueError("only the gaussian distribution is supported")
    if size < 2:
        raise ValueError("size must be at least 2")
    if trials < 2:
        raise ValueError("need at least two trials")
    if not isinstance(rng, Rng):
        rng = Rng(rng)
    cfg = QuantConfig(dtype_for_qmax(q_max), PER_TOKEN, ScaleDType.REAL64)
    c = gaussian_constant(size, log)
    errs, fros, maxes = np.empty(trials), np.empty(trials), np.empty(trials)
    for start in range(0, trials, batch):
        idx = range(start, min(trials, start + batch))
        r = np.stack([rng.spawn(i).normal(size) for i in idx])
        q = fake_quant(r, cfg, axis=1)
        sl = slice(idx.start, idx.stop)
        errs[sl] = np.sqrt(np.sum((r - q) ** 2, axis=1))
        fros[sl] = np.sqrt(np.sum(r * r, axis=1))
        maxes[sl] = np.abs(r).max(axis=1)
    lhs, lhs_se = _mean_se(errs)
    fro, fro_se = _mean_se(fros)
    mx, mx_se = _mean_se(maxes)
    bound = c * math.sqrt(size) / q_max * fro
    se_rel = _relative(lhs_se, lhs) + _relative(fro_se, fro)
    reg_se = _relative(mx_se, mx) + _relative(fro_se, fro)
    return ResidualBoundCheck(
        size=size,
        q_max=float(q_max),
        trials=trials,
        c=c,
        mean_quant_err=lhs,
        bound=bound,
        se_rel=se_rel,
        holds=lhs <= bound * (1 + 3 * se_rel),
        mean_max=mx,
        mean_fro=fro,
        regularity_holds=mx <= c * fro * (1 + 3 * reg_se),
    )


# ---------------------------------------------------------------------------
# spectra


@dataclass(frozen=True, eq=False)
class SpectrumReport:
    sigma: np.ndarray

    def top_r_energy(self, r: int) -> float:
        sq = self.sigma**2
        total = float(np.sum(sq))
        if not 0 <= r <= sq.size:
            raise ValueError(f"rank {r} out of range [0, {sq.size}]")
        if total == 0:
            return 1.0 if r == sq.size else 0.0
        return float(np.sum(sq[:r])) / total

    def residual_norm(self, r: int) -> float:
        if not 0 <= r <= self.sigma.size:
            raise ValueError(f"rank {r} out of range [0, {self.sigma.size}]")
        return float(np.sqrt(np.sum(self.sigma[r:] ** 2)))


def spectrum(w) -> SpectrumReport:
    return SpectrumReport(svd(w, leading=0).s)


# ---------------------------------------------------------------------------
# comparison ladder


def compare_schemes(
    x_cal,
    w,
    rank: int,
    weight_cfg: QuantConfig,
    act_cfg: QuantConfig | None,
    *,
    alpha: float | None = None,
    alpha_grid: Sequence[float] | None = None,
    refine_iters: int = pipeline.DEFAULT_REFINE_ITERS,
    damping: float = pipeline.DEFAULT_DAMPING,
    extra_ranks: Sequence[int] = (),
) -> list[ErrorReport]:
    """Error reports for the six schemes, in :data:`SCHEMES` order.

    smooth-only is the pipeline at rank 0 and svd-only the pipeline without
    smoothing; both search or fix alpha the same way as svdquant. The GPTQ
    variant reuses the smoothing and first decomposition of the RTN variant.
    ``extra_ranks`` appends ``svdquant-RTN@r`` rows for more ranks, sharing
    the alpha search.
    """
    x, w = as_tensor(x_cal), as_tensor(w)
    extra = [int(r) for r in extra_ranks if int(r) != rank]
    ranks = [0, rank] + extra
    x, w = pipeline._check_inputs(x, w, ranks)
    chosen = pipeline._resolve_smoothing(
        x, w, ranks, weight_cfg, act_cfg, alpha, alpha_grid, True, True
    )
    xw = matmul(x, w)
    common = dict(refine_iters=refine_iters, damping=damping, refine_target="smoothed", xw=xw)

    def build(r, spec, svd0, gptq=False):
        return pipeline._build(x, w, r, weight_cfg, act_cfg, spec, svd0, use_gptq=gptq, **common)

    reports = [layer_error(x, w, act_cfg, weight_cfg, scheme="naive-RTN")]
    reports.append(layer_report(build(0, *chosen[0]), x, w, "smooth-only"))
    ident = pipeline.SmoothingSpec.identity(w.shape[0])
    reports.append(layer_report(build(rank, ident, None), x, w, "svd-only"))
    reports.append(lorc_report(x, w, rank, weight_cfg, act_cfg))
    spec, svd0 = chosen[rank]
    reports.append(layer_report(build(rank, spec, svd0), x, w, "svdquant-RTN"))
    reports.append(layer_report(build(rank, spec, svd0, gptq=True), x, w, "svdquant-GPTQ"))
    for r in extra:
        reports.append(layer_report(build(r, *chosen[r]), x, w, f"svdquant-RTN@{r}"))
    return reports


@dataclass(frozen=True)
class RankPoint:
    rank: int
    relative_E: float
    param_overhead: float


def param_overhead(m: int, n: int, r: int) -> float:
    """Extra parameters of a rank-r branch relative to the layer: ``(m r + n r) / (m n)``."""
    return (m * r + n * r) / (m * n)


def rank_sweep(
    x_cal,
    w,
    ranks: Sequence[int],
    weight_cfg: QuantConfig,
    act_cfg: QuantConfig | None,
    **options,
) -> list[RankPoint]:
    x, w = as_tensor(x_cal), as_tensor(w)
    m, n = w.shape
    layers = pipeline.svdquant_ranks(x, w, ranks, weight_cfg, act_cfg, **options)
    ref = fro_norm(matmul(x, w))
    return [
        RankPoint(l.rank, _relative(l.calib_error, ref), param_overhead(m, n, l.rank)) for l in layers
    ]


@dataclass(frozen=True, eq=False)
class SpectrumSet:
    """Singular values of ``W``, ``W_hat`` and the rank-r residual ``R``."""

    w: np.ndarray
    w_hat: np.ndarray
    residual: np.ndarray


def spectrum_set(x_cal, w, layer: QuantizedLinear) -> SpectrumSet:
    x, w = as_tensor(x_cal), as_tensor(w)
    _, w_hat = apply_smoothing(x, w, layer.smoothing)
    _, resid = truncated_svd(w_hat, layer.rank)
    return SpectrumSet(spectrum(w).sigma, spectrum(w_hat).sigma, spectrum(resid).sigma)
