"""Layer quantization with outlier smoothing and a 16-bit low-rank branch.

For a linear layer ``y = X @ W`` with ``X`` (b x m) and ``W`` (m x n):

1. smoothing divides input channel ``i`` by ``lam[i]`` and multiplies weight
   row ``i`` by it, so ``X_hat @ W_hat == X @ W``;
2. ``W_hat`` is split into its best rank-r part ``L1 @ L2`` and a residual
   ``R = W_hat - L1 @ L2``;
3. only ``R`` and ``X_hat`` are quantized. The layer computes
   ``X_hat @ L1 @ L2 + Q(X_hat) @ Q(R)``.

The low-rank factors can be refined by re-decomposing ``W_hat - Q(R)``; the
iterate with the smallest calibration error wins.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .linalg import LowRankPair, SvdResult, low_rank_from_svd, svd, truncated_svd
from .quant import (
    QuantConfig,
    QuantizedTensor,
    encode_with_scales,
    fake_quant_act,
    int4_config,
    int8_act_config,
    int8_weight_config,
    lattice_decode,
    nf4_weight_config,
    nvfp4_config,
    pack_codes,
    quantize_weight,
    scale_shape,
    scales_from_absmax,
    tensor_scale_for,
)
from .tensor import Tensor, as_tensor, fro_norm, matmul

log = logging.getLogger(__name__)

DEFAULT_ALPHA_GRID = tuple(round(0.05 * i, 2) for i in range(21))
DEFAULT_REFINE_ITERS = 10
DEFAULT_DAMPING = 0.01
LAMBDA_MIN, LAMBDA_MAX = 1e-5, 1e5


class SingularHessianError(ValueError):
    pass


@dataclass(frozen=True)
class Preset:
    name: str
    weight_cfg: QuantConfig
    act_cfg: QuantConfig | None
    rank: int


PRESETS = {
    "int4": Preset("int4", int4_config(), int4_config(), 32),
    "nvfp4": Preset("nvfp4", nvfp4_config(), nvfp4_config(), 32),
    "int8": Preset("int8", int8_weight_config(), int8_act_config(), 16),
    "nf4-w4a16": Preset("nf4-w4a16", nf4_weight_config(), None, 0),
}


@dataclass(frozen=True, eq=False)
class SmoothingSpec:
    """Per-input-channel factors ``lam``; ``alpha`` is None when not derived from one."""

    lam: np.ndarray
    alpha: float | None = None

    @classmethod
    def identity(cls, m: int) -> "SmoothingSpec":
        return cls(np.ones(m), None)


@dataclass(frozen=True, eq=False)
class QuantizedLinear:
    smoothing: SmoothingSpec
    branch: LowRankPair
    residual_q: QuantizedTensor
    weight_cfg: QuantConfig
    act_cfg: QuantConfig | None
    calib_error: float | None = None
    history: tuple[float, ...] = ()
    chosen_iterate: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        m, n = self.residual_q.shape
        if self.branch.shape != (m, n) or self.smoothing.lam.shape != (m,):
            raise ValueError("layer components disagree on shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.residual_q.shape

    @property
    def rank(self) -> int:
        return self.branch.rank

    @property
    def alpha(self) -> float | None:
        return self.smoothing.alpha


# ---------------------------------------------------------------------------
# smoothing


def compute_smoothing(x_cal, w, alpha: float) -> SmoothingSpec:
    """``lam_i = max|X[:, i]|**alpha / max|W[i, :]|**(1 - alpha)``, clamped to
    [1e-5, 1e5]; a 0/0 channel gets 1."""
    x_cal, w = as_tensor(x_cal), as_tensor(w)
    if x_cal.shape[1] != w.shape[0]:
        raise ValueError(f"calibration has {x_cal.shape[1]} channels, weight has {w.shape[0]} rows")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    xmax = np.abs(x_cal).max(axis=0) if x_cal.shape[0] else np.zeros(x_cal.shape[1])
    wmax = np.abs(w).max(axis=1) if w.shape[1] else np.zeros(w.shape[0])
    with np.errstate(divide="ignore", invalid="ignore"):
        lam = np.power(xmax, alpha) / np.power(wmax, 1.0 - alpha)
    lam = np.where(np.isnan(lam), 1.0, lam)
    return SmoothingSpec(np.clip(lam, LAMBDA_MIN, LAMBDA_MAX), float(alpha))


def apply_smoothing(x, w, spec: SmoothingSpec) -> tuple[Tensor, Tensor]:
    x, w = as_tensor(x), as_tensor(w)
    lam = spec.lam
    return x / lam, w * lam[:, None]


# ---------------------------------------------------------------------------
# forward


def _layer_output(x_hat: Tensor, qx_hat: Tensor, branch: LowRankPair, deq_residual) -> Tensor:
    low = matmul(matmul(x_hat, branch.l1), branch.l2)
    return low + matmul(qx_hat, deq_residual)


def forward(layer: QuantizedLinear, x) -> Tensor:
    """``X_hat @ L1 @ L2 + Q(X_hat) @ Q(R)`` with activations quantized on the fly."""
    x = as_tensor(x)
    m, _ = layer.shape
    if x.shape[1] != m:
        raise ValueError(f"input has {x.shape[1]} columns, layer expects {m}")
    x_hat = x / layer.smoothing.lam
    qx = fake_quant_act(x_hat, layer.act_cfg)
    return _layer_output(x_hat, qx, layer.branch, layer.residual_q.dequantize())


def calibration_error(layer: QuantizedLinear, x, w) -> float:
    """``||X W - forward(layer, X)||_F``."""
    return fro_norm(matmul(as_tensor(x), as_tensor(w)) - forward(layer, x))


# ---------------------------------------------------------------------------
# GPTQ


def gptq_hessian_factor(x_hat_cal, damping: float = DEFAULT_DAMPING) -> np.ndarray:
    """Upper Cholesky factor of the inverse of ``X^T X + damping * mean(diag) * I``."""
    x = as_tensor(x_hat_cal)
    if x.shape[0] < 1:
        raise ValueError("GPTQ needs at least one calibration row")
    h = matmul(x.T.copy(), x)
    damp = damping * float(np.mean(np.diag(h)))
    h[np.diag_indices_from(h)] += damp
    try:
        chol = scipy.linalg.cholesky(h, lower=True)
        hinv = scipy.linalg.cho_solve((chol, True), np.eye(h.shape[0]))
        return scipy.linalg.cholesky(hinv, lower=False)
    except (np.linalg.LinAlgError, scipy.linalg.LinAlgError) as exc:
        diag = np.diag(h)
        raise SingularHessianError(
            f"Hessian is singular after damping {damping} "
            f"(diag min {diag.min():.3e}, max {diag.max():.3e}): {exc}"
        ) from None


def gptq_quantize_residual(
    r_mat,
    x_hat_cal,
    cfg: QuantConfig,
    damping: float = DEFAULT_DAMPING,
    *,
    factor: np.ndarray | None = None,
) -> QuantizedTensor:
    """GPTQ over the reduction dimension (rows of ``r_mat``), in natural order.

    After row ``i`` is quantized, its error divided by ``U[i, i]`` is pushed onto
    rows ``i+1..`` through ``U[i, i+1:]``, where ``U`` is the upper Cholesky factor
    of the damped inverse Hessian. Group scales are taken from the current
    (already compensated) rows when a group starts; per-tensor, per-column and
    two-level tensor scales come from the input up front.
    """
    w = as_tensor(r_mat)
    m, n = w.shape
    if factor is None:
        factor = gptq_hessian_factor(x_hat_cal, damping)
    if factor.shape != (m, m):
        raise ValueError("Hessian factor does not match residual rows")
    gran = cfg.granularity.kind
    ts = tensor_scale_for(float(np.abs(w).max()) if w.size else 0.0, cfg)
    ts_mul = ts if ts is not None else 1.0
    sshape = scale_shape((m, n), cfg, axis=0)
    scales = np.ones(sshape)
    if gran == "per_tensor":
        scales = scales_from_absmax(np.array([[np.abs(w).max() if w.size else 0.0]]), cfg, ts)
    elif gran == "per_channel_out":
        scales = scales_from_absmax(np.abs(w).max(axis=0, keepdims=True), cfg, ts)

    g = cfg.granularity.group_size if gran == "per_group" else None
    codes = np.zeros((m, n), dtype=np.int16)
    w = w.copy()
    eff_row = None
    for i in range(m):
        if gran == "per_group":
            gi = i // g
            if i % g == 0:
                block = w[i : i + g]
                scales[gi] = scales_from_absmax(np.abs(block).max(axis=0, keepdims=True), cfg, ts)[0]
                eff_row = scales[gi] * ts_mul
        elif gran == "per_token":
            scales[i] = scales_from_absmax(np.array([[np.abs(w[i]).max()]]), cfg, ts)[0]
            eff_row = scales[i] * ts_mul
        elif eff_row is None:
            eff_row = np.broadcast_to(scales * ts_mul, (1, n))[0]
        row = w[i]
        c = encode_with_scales(row, eff_row, cfg.dtype)
        codes[i] = c
        q = eff_row * lattice_decode(c, cfg.dtype)
        err = (row - q) / factor[i, i]
        if i + 1 < m:
            w[i + 1 :] -= np.outer(factor[i, i + 1 :], err)
    return QuantizedTensor(
        codes=pack_codes(codes, cfg.dtype),
        scales=scales,
        shape=(m, n),
        config=cfg,
        axis=0,
        tensor_scale=ts,
    )


# ---------------------------------------------------------------------------
# alpha search and the full pipeline


@dataclass
class _AlphaPoint:
    alpha: float
    spec: SmoothingSpec
    svd: SvdResult | None
    errors: dict[int, float]


def _check_inputs(x_cal, w, ranks: Sequence[int]):
    x_cal, w = as_tensor(x_cal), as_tensor(w)
    if x_cal.shape[0] < 1:
        raise ValueError("calibration set is empty")
    if x_cal.shape[1] != w.shape[0]:
        raise ValueError(f"calibration has {x_cal.shape[1]} channels, weight has {w.shape[0]} rows")
    k = min(w.shape)
    for r in ranks:
        if not 0 <= r <= k:
            raise ValueError(f"rank {r} out of range [0, {k}]")
    return x_cal, w


def _alpha_sweep(
    x, w, ranks, weight_cfg, act_cfg, grid, quantize_residual: bool = True
) -> list[_AlphaPoint]:
    grid = [float(a) for a in grid]
    if not grid:
        raise ValueError("alpha grid is empty")
    xw = matmul(x, w)
    points = []
    warm = None
    for a in grid:
        spec = compute_smoothing(x, w, a)
        x_hat, w_hat = apply_smoothing(x, w, spec)
        qx = fake_quant_act(x_hat, act_cfg)
        res = svd(w_hat, warm=warm, leading=max(ranks)) if max(ranks) > 0 else None
        warm = res
        errors = {}
        for r in ranks:
            pair = low_rank_from_svd(res, r) if r else LowRankPair.empty(*w.shape)
            resid = w_hat - pair.product()
            deq = quantize_weight(resid, weight_cfg).dequantize() if quantize_residual else resid
            errors[r] = fro_norm(xw - _layer_output(x_hat, qx, pair, deq))
        points.append(_AlphaPoint(a, spec, res, errors))
    return points


def _best_point(points: list[_AlphaPoint], rank: int) -> _AlphaPoint:
    best = None
    for p in sorted(points, key=lambda p: p.alpha):
        if best is None or p.errors[rank] < best.errors[rank]:
            best = p
    return best


def search_alpha(
    x_cal,
    w,
    rank: int,
    weight_cfg: QuantConfig,
    act_cfg: QuantConfig | None,
    grid: Sequence[float] = DEFAULT_ALPHA_GRID,
    *,
    quantize_residual: bool = True,
) -> tuple[float, SmoothingSpec]:
    """Grid search for the migration strength minimizing the calibration output
    error of smooth -> rank-r SVD -> RTN residual. Ties go to the smaller alpha.

    ``quantize_residual=False`` scores the unquantized residual instead
    (activation quantization only).
    """
    x, w = _check_inputs(x_cal, w, [rank])
    best = _best_point(_alpha_sweep(x, w, [rank], weight_cfg, act_cfg, grid, quantize_residual), rank)
    return best.alpha, best.spec


def _quantize_residual(resid, x_hat, cfg, use_gptq, factor):
    if use_gptq:
        return gptq_quantize_residual(resid, x_hat, cfg, factor=factor)
    return quantize_weight(resid, cfg)


def _build(
    x,
    w,
    rank,
    weight_cfg,
    act_cfg,
    spec: SmoothingSpec,
    svd0: SvdResult | None,
    *,
    refine_iters: int,
    use_gptq: bool,
    damping: float,
    refine_target: str,
    xw: Tensor | None = None,
) -> QuantizedLinear:
    x_hat, w_hat = apply_smoothing(x, w, spec)
    qx = fake_quant_act(x_hat, act_cfg)
    if xw is None:
        xw = matmul(x, w)
    factor = gptq_hessian_factor(x_hat, damping) if use_gptq else None
    target = w_hat if refine_target == "smoothed" else w

    if rank > 0:
        res = svd0 if svd0 is not None else svd(w_hat, leading=rank)
        pair = low_rank_from_svd(res, rank)
    else:
        res, pair = None, LowRankPair.empty(*w.shape)
    resid_q = _quantize_residual(w_hat - pair.product(), x_hat, weight_cfg, use_gptq, factor)
    err = fro_norm(xw - _layer_output(x_hat, qx, pair, resid_q.dequantize()))
    best = (err, 0, pair, resid_q)
    history = [err]

    iters = refine_iters if rank > 0 else 0
    for t in range(1, iters + 1):
        res = svd(target - resid_q.dequantize(), warm=res, leading=rank)
        pair = low_rank_from_svd(res, rank)
        resid_q = _quantize_residual(w_hat - pair.product(), x_hat, weight_cfg, use_gptq, factor)
        err = fro_norm(xw - _layer_output(x_hat, qx, pair, resid_q.dequantize()))
        history.append(err)
        if err < best[0]:
            best = (err, t, pair, resid_q)

    err, t_best, pair, resid_q = best
    return QuantizedLinear(
        smoothing=spec,
        branch=pair,
        residual_q=resid_q,
        weight_cfg=weight_cfg,
        act_cfg=act_cfg,
        calib_error=err,
        history=tuple(history),
        chosen_iterate=t_best,
    )


def _resolve_smoothing(x, w, ranks, weight_cfg, act_cfg, alpha, alpha_grid, smooth, quantize_residual):
    """Return {rank: (spec, svd_of_w_hat_or_None)}."""
    if not smooth:
        spec = SmoothingSpec.identity(w.shape[0])
        return {r: (spec, None) for r in ranks}
    if alpha is not None:
        spec = compute_smoothing(x, w, alpha)
        return {r: (spec, None) for r in ranks}
    grid = DEFAULT_ALPHA_GRID if alpha_grid is None else alpha_grid
    points = _alpha_sweep(x, w, list(ranks), weight_cfg, act_cfg, grid, quantize_residual)
    out = {}
    for r in ranks:
        p = _best_point(points, r)
        out[r] = (p.spec, p.svd)
    return out


def svdquant_ranks(
    x_cal,
    w,
    ranks: Sequence[int],
    weight_cfg: QuantConfig,
    act_cfg: QuantConfig | None,
    *,
    alpha: float | None = None,
    alpha_grid: Sequence[float] | None = None,
    smooth: bool = True,
    refine_iters: int = DEFAULT_REFINE_ITERS,
    use_gptq: bool = False,
    damping: float = DEFAULT_DAMPING,
    refine_target: str = "smoothed",
    search_quantizes_residual: bool = True,
) -> list[QuantizedLinear]:
    """:func:`svdquant` at several ranks, sharing the alpha-search decompositions."""
    if refine_target not in ("smoothed", "original"):
        raise ValueError("refine_target must be 'smoothed' or 'original'")
    ranks = [int(r) for r in ranks]
    x, w = _check_inputs(x_cal, w, ranks)
    chosen = _resolve_smoothing(
        x, w, ranks, weight_cfg, act_cfg, alpha, alpha_grid, smooth, search_quantizes_residual
    )
    xw = matmul(x, w)
    layers = []
    for r in ranks:
        spec, svd0 = chosen[r]
        layers.append(
            _build(
                x, w, r, weight_cfg, act_cfg, spec, svd0,
                refine_iters=refine_iters, use_gptq=use_gptq, damping=damping,
                refine_target=refine_target, xw=xw,
            )
        )
    return layers


def svdquant(
    x_cal,
    w,
    rank: int,
    weight_cfg: QuantConfig,
    act_cfg: QuantConfig | None,
    *,
    alpha: float | None = None,
    alpha_grid: Sequence[float] | None = None,
    smooth: bool = True,
    refine_iters: int = DEFAULT_REFINE_ITERS,
    use_gptq: bool = False,
    damping: float = DEFAULT_DAMPING,
    refine_target: str = "smoothed",
    search_quantizes_residual: bool = True,
) -> QuantizedLinear:
    """Quantize one linear layer.

    Smoothing uses ``alpha`` when given, otherwise the alpha with the lowest
    calibration error over ``alpha_grid`` (default 0, 0.05, ..., 1);
    ``smooth=False`` fixes every factor to 1. The residual is quantized by
    round-to-nearest, or by GPTQ with ``use_gptq``. Refinement runs
    ``refine_iters`` re-decompositions of ``W_hat - Q(R)`` (``refine_target=
    "original"`` uses ``W - Q(R)``) and keeps the iterate with the smallest
    ``||X W - forward(X)||_F`` on the calibration set, iterate 0 included.
    """
    return svdquant_ranks(
        x_cal, w, [rank], weight_cfg, act_cfg,
        alpha=alpha, alpha_grid=alpha_grid, smooth=smooth, refine_iters=refine_iters,
        use_gptq=use_gptq, damping=damping, refine_target=refine_target,
        search_quantizes_residual=search_quantizes_residual,
    )[0]


# ---------------------------------------------------------------------------
# LoRA fusion and the LoRC baseline


def lora_fuse(layer: QuantizedLinear, a, b, scale: float = 1.0) -> QuantizedLinear:
    """Append a LoRA update ``scale * X @ a @ b`` to the low-rank branch.

    The branch consumes the smoothed input, so ``a`` is pre-multiplied by
    ``diag(lam)``.
    """
    a, b = as_tensor(a), as_tensor(b)
    m, n = layer.shape
    if a.shape[0] != m or b.shape[1] != n or a.shape[1] != b.shape[0]:
        raise ValueError(f"LoRA factors {a.shape} x {b.shape} do not fit a {m}x{n} layer")
    lam = layer.smoothing.lam
    l1 = np.hstack([layer.branch.l1, (lam[:, None] * a) * scale])
    l2 = np.vstack([layer.branch.l2, b])
    return dataclasses.replace(layer, branch=LowRankPair(l1, l2), calib_error=None, history=())


def lorc_baseline(w, rank: int, weight_cfg: QuantConfig) -> tuple[LowRankPair, QuantizedTensor]:
    """Quantize ``W`` directly, then fit a rank-r correction to ``W - Q(W)``."""
    w = as_tensor(w)
    if not 0 <= rank <= min(w.shape):
        raise ValueError(f"rank {rank} out of range [0, {min(w.shape)}]")
    qw = quantize_weight(w, weight_cfg)
    pair, _ = truncated_svd(w - qw.dequantize(), rank)
    return pair, qw


def lorc_reconstruction(pair: LowRankPair, qw: QuantizedTensor) -> Tensor:
    return qw.dequantize() + pair.product()
