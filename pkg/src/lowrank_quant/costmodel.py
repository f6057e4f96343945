"""Roofline model of memory traffic and latency for a quantized layer with a
16-bit low-rank side branch.

A layer with ``t`` tokens, ``m`` inputs and ``n`` outputs runs as a chain of
kernels. The 4-bit baseline is *quantize* (read 16-bit X, write packed X and
its scales) followed by *gemm* (read packed operands and scales, write the
16-bit output). The low-rank branch adds:

* unfused: *down* (read 16-bit X_hat and L1, write X_hat L1) and *up* (read
  the intermediate and L2, write a partial output that the add re-reads);
* fused: down runs inside quantize and reuses its input read, and up runs
  in the gemm epilogue, so only the intermediate is written and read.

Each kernel takes ``max(bytes / bandwidth, compute time)``. The default
hardware numbers are illustrative and not calibrated to a particular GPU.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class Plan(str, enum.Enum):
    UNFUSED = "unfused"
    FUSED = "fused"


@dataclass(frozen=True)
class HardwareModel:
    dram_bandwidth: float = 1.0e12  # bytes/s
    compute_rate_4bit: float = 4.0e14  # MAC/s
    compute_rate_16bit: float = 1.0e14  # MAC/s
    l2_capacity: float = 50.0e6  # bytes
    compute_rate_8bit: float = 2.0e14  # MAC/s

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not v > 0:
                raise ValueError(f"{f.name} must be positive, got {v}")

    def scaled(self, factor: float) -> "HardwareModel":
        """Same machine with bandwidth and every compute rate multiplied by ``factor``."""
        return HardwareModel(
            dram_bandwidth=self.dram_bandwidth * factor,
            compute_rate_4bit=self.compute_rate_4bit * factor,
            compute_rate_16bit=self.compute_rate_16bit * factor,
            l2_capacity=self.l2_capacity,
            compute_rate_8bit=self.compute_rate_8bit * factor,
        )

    def lowbit_rate(self, bits: int) -> float:
        if bits <= 4:
            return self.compute_rate_4bit
        if bits <= 8:
            return self.compute_rate_8bit
        return self.compute_rate_16bit

    @classmethod
    def from_json(cls, path) -> "HardwareModel":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown hardware fields: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in data.items()})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class KernelPlan:
    plan: Plan
    tokens: int
    in_features: int
    out_features: int
    rank: int
    act_bits: int = 4
    weight_bits: int = 4
    branch_bits: int = 16
    group_size: int = 64
    scale_bytes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "plan", Plan(self.plan))
        if min(self.tokens, self.in_features, self.out_features) < 1:
            raise ValueError("shape entries must be positive")
        if self.rank < 0:
            raise ValueError("rank must be nonnegative")
        if self.act_bits not in (4, 8, 16) or self.weight_bits not in (4, 8, 16):
            raise ValueError("bit widths must be 4, 8 or 16")
        if self.group_size < 1 or self.scale_bytes < 0:
            raise ValueError("invalid group size or scale width")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.tokens, self.in_features, self.out_features


@dataclass(frozen=True)
class Traffic:
    """Bytes moved. ``lowrank_extra`` counts activation-side traffic added by
    the branch; ``lowrank_weights`` is the read of L1 and L2."""

    main_branch: float
    lowrank_extra: float
    lowrank_weights: float

    @property
    def total(self) -> float:
        return self.main_branch + self.lowrank_extra + self.lowrank_weights


def _hbytes(count: float, bits: int) -> float:
    return count * bits / 8.0


def _main_parts(p: KernelPlan) -> dict[str, float]:
    t, m, n = p.shape
    groups = math.ceil(m / p.group_size)
    parts = {"x16": 2.0 * t * m, "out": 2.0 * t * n}
    parts["xq"] = _hbytes(t * m, p.act_bits) + (t * groups * p.scale_bytes if p.act_bits < 16 else 0.0)
    parts["w"] = _hbytes(m * n, p.weight_bits) + (groups * n * p.scale_bytes if p.weight_bits < 16 else 0.0)
    return parts


def _intermediate_in_dram(p: KernelPlan, l2_capacity: float | None) -> bool:
    if l2_capacity is None:
        return True
    return _hbytes(p.tokens * p.rank, p.branch_bits) > l2_capacity


def traffic_bytes(plan: KernelPlan, l2_capacity: float | None = None) -> Traffic:
    """Main-branch and low-rank traffic in bytes.

    Unfused extra is ``2tm + 2tr + 2tr + 2tn + 2tn`` (16-bit) and fused extra is
    ``2tr + 2tr``. With ``l2_capacity`` given, an unfused intermediate that fits
    in L2 costs no DRAM traffic.
    """
    p = plan
    t, m, n = p.shape
    r = p.rank
    parts = _main_parts(p)
    if p.act_bits < 16:
        main = (parts["x16"] + parts["xq"]) + (parts["xq"] + parts["w"] + parts["out"])
    else:
        main = parts["x16"] + parts["w"] + parts["out"]
    if r == 0:
        return Traffic(main, 0.0, 0.0)
    inter = 2.0 * _hbytes(t * r, p.branch_bits)
    weights = _hbytes(r * (m + n), p.branch_bits)
    if p.plan is Plan.FUSED:
        extra = inter
    else:
        if not _intermediate_in_dram(p, l2_capacity):
            inter = 0.0
        extra = _hbytes(t * m, p.branch_bits) + inter + 2.0 * _hbytes(t * n, p.branch_bits)
    return Traffic(main, extra, weights)


@dataclass(frozen=True)
class Kernel:
    name: str
    bytes: float
    seconds: float


@dataclass(frozen=True)
class LatencyEstimate:
    seconds: float
    baseline_seconds: float
    overhead_fraction: float
    flop_fraction: float
    kernels: tuple[Kernel, ...]


def flop_fraction(m: int, n: int, r: int) -> float:
    """Branch MACs relative to the main GEMM: ``(m r + n r) / (m n)``."""
    return (m * r + n * r) / (m * n)


def _kernel(name: str, nbytes: float, compute_s: float, hw: HardwareModel) -> Kernel:
    return Kernel(name, nbytes, max(nbytes / hw.dram_bandwidth, compute_s))


def kernel_schedule(plan: KernelPlan, hw: HardwareModel, *, with_branch: bool = True) -> list[Kernel]:
    p = plan
    t, m, n = p.shape
    r = p.rank if with_branch else 0
    parts = _main_parts(p)
    gemm_mac = t * m * n / hw.lowbit_rate(max(p.act_bits, p.weight_bits))
    quant_bytes = parts["x16"] + parts["xq"]
    gemm_in = parts["xq"] if p.act_bits < 16 else parts["x16"]
    gemm_bytes = gemm_in + parts["w"] + parts["out"]
    b = p.branch_bits
    down_mac = t * m * r / hw.compute_rate_16bit
    up_mac = t * r * n / hw.compute_rate_16bit
    inter = _hbytes(t * r, b) if _intermediate_in_dram(p, hw.l2_capacity) or p.plan is Plan.FUSED else 0.0

    if r == 0:
        ks = [_kernel("gemm", gemm_bytes, gemm_mac, hw)]
        if p.act_bits < 16:
            ks.insert(0, _kernel("quantize", quant_bytes, 0.0, hw))
        return ks
    l1, l2 = _hbytes(m * r, b), _hbytes(r * n, b)
    if p.plan is Plan.FUSED:
        first = quant_bytes if p.act_bits < 16 else parts["x16"]
        return [
            _kernel("quantize+down", first + l1 + _hbytes(t * r, b), down_mac, hw),
            _kernel("gemm+up", gemm_bytes + _hbytes(t * r, b) + l2, gemm_mac + up_mac, hw),
        ]
    ks = [
        _kernel("down", _hbytes(t * m, b) + l1 + inter, down_mac, hw),
        _kernel("up", inter + l2 + _hbytes(t * n, b), up_mac, hw),
        _kernel("gemm+add", gemm_bytes + _hbytes(t * n, b), gemm_mac, hw),
    ]
    if p.act_bits < 16:
        ks.insert(0, _kernel("quantize", quant_bytes, 0.0, hw))
    return ks


def latency_estimate(plan: KernelPlan, hw: HardwareModel | None = None) -> LatencyEstimate:
    """Roofline latency of ``plan`` and its overhead over the branch-free low-bit layer."""
    hw = hw or HardwareModel()
    ks = kernel_schedule(plan, hw)
    base = kernel_schedule(plan, hw, with_branch=False)
    total = sum(k.seconds for k in ks)
    base_s = sum(k.seconds for k in base)
    _, m, n = plan.shape
    return LatencyEstimate(
        seconds=total,
        baseline_seconds=base_s,
        overhead_fraction=(total - base_s) / base_s,
        flop_fraction=flop_fraction(m, n, plan.rank),
        kernels=tuple(ks),
    )
