"""Acceptance suite shared by ``lowrank-quant selftest`` and the test suite.

Each criterion is a function returning a :class:`CriterionResult`. Results
are memoized per process, so running the CLI selftest after the individual
checks costs nothing extra.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import costmodel, diagnostics, pipeline, quant
from . import io as lqio
from .linalg import truncated_svd, truncated_svd_full
from .quant import (
    INT4,
    PER_TENSOR,
    QuantConfig,
    QuantDType,
    ScaleDType,
    fake_quant,
    fake_quant_act,
    int4_config,
    int8_act_config,
    int8_weight_config,
    nvfp4_config,
)
from .tensor import Rng, fro_norm, matmul, synth_outlier_matrix

LADDER_SEEDS = 100
LADDER_SHAPE = (64, 128, 256)
LADDER_OUTLIERS = 4
LADDER_MAGNITUDE = 50.0
LADDER_RANK = 32
SWEEP_RANKS = (16, 32, 64)


@dataclass(frozen=True)
class CriterionResult:
    number: int
    title: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number:2d} {self.title}: {self.detail}"


_CRITERIA: dict[int, tuple[str, Callable[[], tuple[bool, str]]]] = {}
_CACHE: dict[int, CriterionResult] = {}


def criterion(number: int, title: str):
    def deco(fn):
        _CRITERIA[number] = (title, fn)
        return fn

    return deco


def evaluate(number: int) -> CriterionResult:
    if number not in _CACHE:
        title, fn = _CRITERIA[number]
        t0 = time.perf_counter()
        passed, detail = fn()
        _CACHE[number] = CriterionResult(number, title, bool(passed), detail, time.perf_counter() - t0)
    return _CACHE[number]


def run(only=None) -> list[CriterionResult]:
    numbers = sorted(_CRITERIA) if only is None else sorted(set(only))
    unknown = [n for n in numbers if n not in _CRITERIA]
    if unknown:
        raise ValueError(f"unknown criteria {unknown}")
    return [evaluate(n) for n in numbers]


def parse_selection(text: str) -> list[int]:
    """'1-13' or '2,5,7-9' -> list of criterion numbers."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        else:
            out.append(int(part))
    return out


# ---------------------------------------------------------------------------
# shared fixture


def ladder_instance(seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Outlier activations (64 x 128, 4 columns scaled by 50) and Gaussian weights (128 x 256)."""
    b, m, n = LADDER_SHAPE
    rng = Rng(seed)
    cols = np.argsort(rng.spawn(2).uniform(m), kind="stable")[:LADDER_OUTLIERS]
    x = synth_outlier_matrix(b, m, cols.tolist(), LADDER_MAGNITUDE, rng.spawn(0))
    w = rng.spawn(1).standard_normal(m, n)
    return x, w


_LADDER: dict[int, dict[str, float]] = {}


def ladder_errors(seed: int) -> dict[str, float]:
    """Relative layer errors of the six schemes plus svdquant-RTN at ranks 16 and 64."""
    if seed not in _LADDER:
        x, w = ladder_instance(seed)
        cfg = int4_config()
        extra = [r for r in SWEEP_RANKS if r != LADDER_RANK]
        reps = diagnostics.compare_schemes(x, w, LADDER_RANK, cfg, cfg, extra_ranks=extra)
        _LADDER[seed] = {r.scheme: r.relative_E for r in reps}
    return _LADDER[seed]


def _rng_sizes(rng: Rng, count: int, lo: int, hi: int) -> np.ndarray:
    return lo + (rng.raw(count) % np.uint64(hi - lo + 1)).astype(np.int64)


# ---------------------------------------------------------------------------
# criteria


@criterion(1, "q_max constants")
def _c1():
    got = {"int4": quant.INT4.q_max, "fp4_e2m1": quant.FP4_E2M1.q_max}
    ok = got["int4"] == 7 and got["fp4_e2m1"] == 6
    return ok, f"int4 -> {got['int4']:g}, fp4_e2m1 -> {got['fp4_e2m1']:g}"


@criterion(2, "round-trip error and lattice fixed points")
def _c2():
    rng = Rng(2)
    worst = -math.inf
    exact_fail = 0
    for i in range(1000):
        sub = rng.spawn(i)
        k = 2 + i % 7
        dt = QuantDType.int_k(k)
        rows, cols = (int(v) for v in _rng_sizes(sub, 2, 1, 16))
        scale = 10.0 ** (sub.uniform(1)[0] * 6 - 3)
        t = sub.standard_normal(rows, cols) * scale
        cfg = QuantConfig(dt, PER_TENSOR, ScaleDType.REAL64)
        err = float(np.abs(t - fake_quant(t, cfg)).max())
        bound = float(np.abs(t).max()) / (2 * dt.q_max) + 1e-12
        worst = max(worst, err - bound)

        q = int(dt.q_max)
        codes = (sub.raw(rows * cols) % np.uint64(2 * q + 1)).astype(np.int64) - q
        codes[0] = q
        s = 2.0 ** int(sub.raw(1)[0] % np.uint64(20)) * 2.0**-10
        lat = (codes * s).reshape(rows, cols)
        for sd in (ScaleDType.REAL16, ScaleDType.REAL32, ScaleDType.REAL64):
            back = fake_quant(lat, QuantConfig(dt, PER_TENSOR, sd))
            if not np.array_equal(back.view(np.uint64), lat.view(np.uint64)):
                exact_fail += 1
    ok = worst <= 0 and exact_fail == 0
    return ok, f"max(err - bound) = {worst:.3e} over 1000 tensors; lattice round-trip failures: {exact_fail}"


_BOUND_CONFIGS = (
    (int4_config(), int4_config()),
    (QuantConfig(INT4), QuantConfig(INT4)),
    (nvfp4_config(), nvfp4_config()),
    (int8_weight_config(), int8_act_config()),
)


@criterion(3, "error decomposition bound")
def _c3():
    rng = Rng(3)
    violations, worst = 0, 0.0
    mags = (1.0, 10.0, 100.0)
    for i in range(1000):
        sub = rng.spawn(i)
        b, m, n = (int(v) for v in _rng_sizes(sub, 3, 4, 64))
        mag = mags[i % 3]
        n_out = 1 + int(sub.raw(1)[0] % np.uint64(max(1, m // 8)))
        cols = np.argsort(sub.uniform(m), kind="stable")[:n_out].tolist()
        x = synth_outlier_matrix(b, m, cols, mag, sub.spawn(0))
        w = sub.spawn(1).standard_normal(m, n)
        wcfg, acfg = _BOUND_CONFIGS[(i // 3) % len(_BOUND_CONFIGS)]
        chk = diagnostics.check_layer_bound(x, w, acfg, wcfg)
        if not chk.holds:
            violations += 1
        if chk.rhs > 0:
            worst = max(worst, chk.lhs / chk.rhs)
    return violations == 0, f"{violations} violations in 1000 instances; max lhs/rhs = {worst:.4f}"


@criterion(4, "Gaussian quantization error bound")
def _c4():
    parts, ok = [], True
    for size in (256, 1024, 4096):
        for q in (7, 6):
            chk = diagnostics.check_residual_bound(size, q, 1000, Rng(4000 + size + q))
            ok = ok and chk.holds and chk.regularity_holds
            parts.append(
                f"size={size} q_max={q}: {chk.mean_quant_err:.4g} <= {chk.bound:.4g} "
                f"({'ok' if chk.holds else 'FAIL'}), E max {chk.mean_max:.4g} <= "
                f"{chk.c * chk.mean_fro:.4g} ({'ok' if chk.regularity_holds else 'FAIL'})"
            )
    return ok, "; ".join(parts)


@criterion(5, "residual-norm identity and Eckart-Young optimality")
def _c5():
    rng = Rng(5)
    worst = 0.0
    for i in range(100):
        sub = rng.spawn(i)
        m, n = (int(v) for v in _rng_sizes(sub, 2, 2, 48))
        r = int(sub.raw(1)[0] % np.uint64(min(m, n) + 1))
        a = sub.standard_normal(m, n)
        _, resid, _ = truncated_svd_full(a, r)
        sigma = diagnostics.spectrum(a).sigma
        want = float(np.sqrt(np.sum(sigma[r:] ** 2)))
        got = fro_norm(resid)
        denom = max(want, 1e-300)
        worst = max(worst, abs(got - want) / denom if want > 0 else got / fro_norm(a))
    beaten = 0
    for i in range(20):
        sub = rng.spawn(1000 + i)
        a = sub.standard_normal(6, 6)
        for r in (1, 2, 3):
            _, resid = truncated_svd(a, r)
            best = fro_norm(resid)
            f1 = sub.normal((1000, 6, r))
            f2 = sub.normal((1000, r, 6))
            comp = np.einsum("kir,krj->kij", f1, f2)
            errs = np.sqrt(np.sum((a[None] - comp) ** 2, axis=(1, 2)))
            beaten += int(np.sum(errs < best))
    ok = worst <= 1e-8 and beaten == 0
    return ok, f"max relative residual mismatch {worst:.2e} on 100 matrices; {beaten} of 60000 random rank-r competitors beat the truncation"


@criterion(6, "smoothing identity")
def _c6():
    rng = Rng(6)
    worst = 0.0
    for i in range(100):
        sub = rng.spawn(i)
        b, m, n = (int(v) for v in _rng_sizes(sub, 3, 2, 48))
        cols = np.argsort(sub.uniform(m), kind="stable")[: max(1, m // 10)].tolist()
        x = synth_outlier_matrix(b, m, cols, 10.0 ** (1 + 2 * sub.uniform(1)[0]), sub.spawn(0))
        w = sub.spawn(1).standard_normal(m, n)
        xw = matmul(x, w)
        for a in pipeline.DEFAULT_ALPHA_GRID:
            xh, wh = pipeline.apply_smoothing(x, w, pipeline.compute_smoothing(x, w, a))
            worst = max(worst, fro_norm(xw - matmul(xh, wh)) / fro_norm(xw))
    return worst <= 1e-12, f"max ||XW - X_hat W_hat|| / ||XW|| = {worst:.2e} over 100 instances x 21 alphas"


@criterion(7, "low-rank branch cancels in the layer error")
def _c7():
    rng = Rng(7)
    worst = 0.0
    presets = [pipeline.PRESETS[k] for k in ("int4", "nvfp4", "int8")]
    for i in range(100):
        sub = rng.spawn(i)
        b, m, n = (int(v) for v in _rng_sizes(sub, 3, 8, 48))
        r = int(sub.raw(1)[0] % np.uint64(min(m, n) // 2 + 1))
        x = synth_outlier_matrix(b, m, [0, m // 2], 30.0, sub.spawn(0))
        w = sub.spawn(1).standard_normal(m, n)
        p = presets[i % 3]
        layer = pipeline.svdquant(
            x, w, r, p.weight_cfg, p.act_cfg, alpha=float(sub.uniform(1)[0]), refine_iters=i % 3
        )
        xh, wh = pipeline.apply_smoothing(x, w, layer.smoothing)
        resid = wh - layer.branch.product()
        lhs = fro_norm(matmul(xh, wh) - pipeline.forward(layer, x))
        rhs = fro_norm(matmul(xh, resid) - matmul(fake_quant_act(xh, p.act_cfg), layer.residual_q.dequantize()))
        worst = max(worst, abs(lhs - rhs) / max(lhs, rhs))
    return worst <= 1e-9, f"max relative gap {worst:.2e} over 100 instances"


@criterion(8, "ablation ordering on outlier instances")
def _c8():
    wins_all = wins_gptq = 0
    for s in range(LADDER_SEEDS):
        e = ladder_errors(s)
        sv = e["svdquant-RTN"]
        if sv <= e["naive-RTN"] and sv <= e["smooth-only"] and sv <= e["svd-only"]:
            wins_all += 1
        if e["svdquant-GPTQ"] <= sv:
            wins_gptq += 1
    ok = wins_all >= 95 and wins_gptq >= 90
    return ok, f"svdquant best of naive/smooth-only/svd-only in {wins_all}/100 (need 95); GPTQ <= RTN in {wins_gptq}/100 (need 90)"


def _gptq_identity_case(seed: int) -> bool:
    rng = Rng(seed)
    m, n, b = 64, 64, 256
    x = np.zeros((b, m))
    vals = rng.spawn(0).normal((m, b // m)) + 3.0
    for i in range(m):
        x[i * (b // m) : (i + 1) * (b // m), i] = vals[i]
    r = rng.spawn(1).standard_normal(m, n)
    cfg = int4_config()
    g = pipeline.gptq_quantize_residual(r, x, cfg)
    return g.equals(quant.quantize_weight(r, cfg))


def gptq_proxy_pair(seed: int) -> tuple[float, float]:
    """(GPTQ, RTN) proxy losses ``||X R - X Q(R)||_F`` on a 64 x 64 residual with
    correlated 256-row calibration."""
    rng = Rng(seed)
    m, n, b = 64, 64, 256
    mix = rng.spawn(0).standard_normal(m, m) / math.sqrt(m) + np.eye(m)
    x = matmul(rng.spawn(1).standard_normal(b, m), mix)
    r = rng.spawn(2).standard_normal(m, n)
    cfg = int4_config()
    xr = matmul(x, r)
    g = pipeline.gptq_quantize_residual(r, x, cfg).dequantize()
    q = quant.quantize_weight(r, cfg).dequantize()
    return fro_norm(xr - matmul(x, g)), fro_norm(xr - matmul(x, q))


@criterion(9, "GPTQ correctness")
def _c9():
    ident = sum(_gptq_identity_case(900 + s) for s in range(10))
    wins = sum(g <= q for g, q in (gptq_proxy_pair(s) for s in range(100)))
    ok = ident == 10 and wins >= 90
    return ok, f"diagonal Hessian equals RTN bitwise in {ident}/10; proxy loss win rate {wins}/100 (need 90)"


@criterion(10, "LoRA fusion exactness")
def _c10():
    rng = Rng(10)
    worst = 0.0
    for s in range(100):
        sub = rng.spawn(s)
        b, m, n = 16, 24, 20
        x = synth_outlier_matrix(b, m, [3, 11], 20.0, sub.spawn(0))
        w = sub.spawn(1).standard_normal(m, n)
        layer = pipeline.svdquant(x, w, 4, int4_config(), int4_config(), alpha=0.5, refine_iters=1)
        rl = 1 + s % 4
        a = sub.spawn(2).standard_normal(m, rl)
        bb = sub.spawn(3).standard_normal(rl, n)
        scale = 0.5 + sub.uniform(1)[0]
        fused = pipeline.lora_fuse(layer, a, bb, scale)
        want = pipeline.forward(layer, x) + scale * matmul(matmul(x, a), bb)
        got = pipeline.forward(fused, x)
        worst = max(worst, fro_norm(got - want) / fro_norm(want))
        if np.all(layer.smoothing.lam == 1.0):
            return False, "fixture has lambda = 1"
    return worst <= 1e-9, f"max relative gap {worst:.2e} over 100 seeds with lambda != 1"


@criterion(11, "rank parameter overhead")
def _c11():
    from .cli import fmt

    x, w = ladder_instance(0)
    m, n = w.shape
    pts = diagnostics.rank_sweep(x, w, [0, 8], int4_config(), int4_config(), alpha=0.5, refine_iters=0)
    exact = all(p.param_overhead == (m * p.rank + n * p.rank) / (m * n) for p in pts)
    big = diagnostics.param_overhead(3072, 3072, 32)
    text = fmt(big)
    ok = exact and big == (3072 * 32 + 3072 * 32) / (3072 * 3072) and text.startswith("0.0208")
    return ok, f"sweep overhead matches (mr+nr)/mn exactly: {exact}; m=n=3072, r=32 -> {text}"


@criterion(12, "fused versus unfused latency overhead")
def _c12():
    hw = costmodel.HardwareModel()
    est = {
        p: costmodel.latency_estimate(costmodel.KernelPlan(p, 4096, 3072, 3072, 32), hw).overhead_fraction
        for p in costmodel.Plan
    }
    u, f = est[costmodel.Plan.UNFUSED], est[costmodel.Plan.FUSED]
    ok = u >= 5 * f and f <= 0.15
    return ok, f"unfused {u:.4f}, fused {f:.4f}, ratio {u / f:.2f} (need >= 5, fused <= 0.15)"


@criterion(13, "error nonincreasing in rank")
def _c13():
    good = 0
    for s in range(LADDER_SEEDS):
        e = ladder_errors(s)
        vals = [e["svdquant-RTN" if r == LADDER_RANK else f"svdquant-RTN@{r}"] for r in SWEEP_RANKS]
        if all(a >= b for a, b in zip(vals, vals[1:])):
            good += 1
    return good >= 90, f"relative error nonincreasing over ranks {SWEEP_RANKS} in {good}/100 seeds (need 90)"


def _bits_equal(a, b) -> bool:
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()


@criterion(14, "serialization round-trip and selftest")
def _c14():
    from . import cli

    rng = Rng(14)
    tensor_fail = 0
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        for i in range(1000):
            sub = rng.spawn(i)
            rows, cols = (int(v) for v in _rng_sizes(sub, 2, 0, 9))
            t = sub.standard_normal(rows, cols) * 10.0 ** float(sub.uniform(1)[0] * 20 - 10)
            dt = "float64" if i % 2 == 0 else "float32"
            path = tmp / "t.svdqt"
            lqio.save_tensor(path, t, dt)
            want = t if dt == "float64" else t.astype(np.float32)
            if not _bits_equal(lqio.load_tensor(path), want):
                tensor_fail += 1

        pack_fail = 0
        cases = [("int4", 8, False), ("nvfp4", 8, False), ("int8", 4, True), ("nf4-w4a16", 0, False)]
        for j, (name, r, gptq) in enumerate(cases):
            p = pipeline.PRESETS[name]
            sub = rng.spawn(5000 + j)
            x = synth_outlier_matrix(20, 33, [4], 25.0, sub.spawn(0))  # odd element count
            w = sub.spawn(1).standard_normal(33, 17)
            layer = pipeline.svdquant(x, w, r, p.weight_cfg, p.act_cfg, alpha=0.5, refine_iters=2, use_gptq=gptq)
            d = tmp / f"pack_{name}"
            lqio.save_pack(d, layer)
            back = lqio.load_pack(d)
            if not (lqio.layers_equal(layer, back) and _bits_equal(pipeline.forward(back, x), pipeline.forward(layer, x))):
                pack_fail += 1
    nested = cli.main(["selftest", "--only", "1-13"])
    ok = tensor_fail == 0 and pack_fail == 0 and nested == 0
    return ok, (
        f"tensor round-trip failures {tensor_fail}/1000; pack/forward failures {pack_fail}/{len(cases)}; "
        f"selftest (criteria 1-13) exit {nested}"
    )
