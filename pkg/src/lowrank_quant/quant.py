"""Symmetric low-bit quantization: lattices, scales, packing, (de)quantize.

Scales follow ``s = absmax(scope) / q_max``; the scale is rounded to its
storage precision first, and codes are the input divided by the stored scale
then snapped to the lattice. Integer lattices round half away from zero and
clamp to ``[-q_max, q_max]``. Table lattices (FP4 E2M1, NF4, FP8 E4M3) snap
to the nearest level, with ties going to the even level index.

Reduction axis: weights ``W`` (m x n) reduce over rows (``axis=0``: one scale
per output column, groups run down each column); activations ``X`` (b x m)
reduce over columns (``axis=1``: one scale per token, groups run along it).

Packed layout: 4-bit codes go two per byte with the low nibble holding the
even flat (row-major) index. IntK nibbles are two's complement, FP4 nibbles
are ``sign << 3 | magnitude_index`` and NF4 nibbles are the level index. Codes
wider than 4 bits take one byte each. An odd count pads the last high nibble
with zero.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .tensor import Tensor, as_tensor

# QLoRA NormalFloat4 levels (Dettmers et al. 2023, bitsandbytes `create_normal_map`,
# offset 0.9677083), transcribed as published in float32.
NF4_LEVELS = (
    -1.0,
    -0.6961928009986877,
    -0.5250730514526367,
    -0.39491748809814453,
    -0.28444138169288635,
    -0.18477343022823334,
    -0.09105003625154495,
    0.0,
    0.07958029955625534,
    0.16093020141124725,
    0.24611230194568634,
    0.33791524171829224,
    0.44070982933044434,
    0.5626170039176941,
    0.7229568362236023,
    1.0,
)

FP4_E2M1_MAGNITUDES = (0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0)
FP8_E4M3_MAX = 448.0


@lru_cache(maxsize=None)
def fp8_e4m3_magnitudes() -> np.ndarray:
    """The 127 non-negative finite E4M3 values, indexed by their 7-bit code."""
    vals = np.empty(127)
    for code in range(127):
        e, m = code >> 3, code & 7
        vals[code] = m / 8.0 * 2.0**-6 if e == 0 else (1.0 + m / 8.0) * 2.0 ** (e - 7)
    vals.flags.writeable = False
    return vals


def nf4_levels() -> np.ndarray:
    return np.array(NF4_LEVELS, dtype=np.float64)


def _nearest_index(y: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Index of the nearest ascending-``table`` entry; exact ties pick the even index."""
    hi = np.searchsorted(table, y, side="left")
    hi = np.clip(hi, 1, len(table) - 1)
    lo = hi - 1
    d_lo = y - table[lo]
    d_hi = table[hi] - y
    idx = np.where(d_hi < d_lo, hi, lo)
    tie = d_hi == d_lo
    idx = np.where(tie, np.where(lo % 2 == 0, lo, hi), idx)
    idx = np.where(y <= table[0], 0, idx)
    idx = np.where(y >= table[-1], len(table) - 1, idx)
    return idx


class Kind(str, enum.Enum):
    INT = "int"
    FP4_E2M1 = "fp4_e2m1"
    NF4 = "nf4"
    FP8_E4M3 = "fp8_e4m3"


@dataclass(frozen=True)
class QuantDType:
    kind: Kind
    bits: int

    def __post_init__(self):
        if self.kind is Kind.INT and not 2 <= self.bits <= 8:
            raise ValueError(f"integer width must be in 2..8, got {self.bits}")

    @classmethod
    def int_k(cls, k: int) -> "QuantDType":
        return cls(Kind.INT, k)

    @property
    def q_max(self) -> float:
        if self.kind is Kind.INT:
            return float(2 ** (self.bits - 1) - 1)
        if self.kind is Kind.FP4_E2M1:
            return 6.0
        if self.kind is Kind.NF4:
            return 1.0
        return FP8_E4M3_MAX

    @property
    def name(self) -> str:
        return f"int{self.bits}" if self.kind is Kind.INT else self.kind.value

    @property
    def nibble_packed(self) -> bool:
        return self.bits <= 4

    @classmethod
    def from_name(cls, name: str) -> "QuantDType":
        if name.startswith("int"):
            return cls.int_k(int(name[3:]))
        kind = Kind(name)
        return cls(kind, 8 if kind is Kind.FP8_E4M3 else 4)

    def __str__(self) -> str:
        return self.name


INT4 = QuantDType.int_k(4)
INT8 = QuantDType.int_k(8)
FP4_E2M1 = QuantDType(Kind.FP4_E2M1, 4)
NF4 = QuantDType(Kind.NF4, 4)
FP8_E4M3 = QuantDType(Kind.FP8_E4M3, 8)


@dataclass(frozen=True)
class Granularity:
    kind: str  # per_tensor | per_channel_out | per_token | per_group
    group_size: int | None = None

    def __post_init__(self):
        if self.kind not in ("per_tensor", "per_channel_out", "per_token", "per_group"):
            raise ValueError(f"unknown granularity {self.kind!r}")
        if self.kind == "per_group" and (self.group_size is None or self.group_size <= 0):
            raise ValueError("group size must be positive")

    @classmethod
    def per_group(cls, group_size: int) -> "Granularity":
        return cls("per_group", int(group_size))

    def __str__(self) -> str:
        return f"per_group({self.group_size})" if self.kind == "per_group" else self.kind


PER_TENSOR = Granularity("per_tensor")
PER_CHANNEL_OUT = Granularity("per_channel_out")
PER_TOKEN = Granularity("per_token")


class ScaleDType(str, enum.Enum):
    REAL16 = "real16"
    FP8_E4M3 = "fp8_e4m3"
    REAL32 = "real32"
    REAL64 = "real64"  # unrounded; for reference-precision analysis

    @property
    def max_value(self) -> float:
        return {
            ScaleDType.REAL16: float(np.finfo(np.float16).max),
            ScaleDType.FP8_E4M3: FP8_E4M3_MAX,
            ScaleDType.REAL32: float(np.finfo(np.float32).max),
            ScaleDType.REAL64: float(np.finfo(np.float64).max),
        }[self]

    @property
    def min_positive(self) -> float:
        return {
            ScaleDType.REAL16: 2.0**-24,
            ScaleDType.FP8_E4M3: 2.0**-9,
            ScaleDType.REAL32: 2.0**-149,
            ScaleDType.REAL64: 5e-324,
        }[self]


def round_fp8_e4m3(x) -> np.ndarray:
    """Round to the nearest E4M3 value (ties to even), saturating at +-448."""
    x = np.asarray(x, dtype=np.float64)
    mags = fp8_e4m3_magnitudes()
    idx = _nearest_index(np.abs(x), mags)
    return np.copysign(mags[idx], x)


def round_scale(s, dtype: ScaleDType) -> np.ndarray:
    """Round positive scales to storage precision; values that would round to zero
    are raised to the smallest positive representable value."""
    s = np.asarray(s, dtype=np.float64)
    if dtype is ScaleDType.REAL64:
        out = s.copy()
    elif dtype is ScaleDType.REAL32:
        out = s.astype(np.float32).astype(np.float64)
    elif dtype is ScaleDType.REAL16:
        with np.errstate(over="ignore"):
            out = s.astype(np.float16).astype(np.float64)
    else:
        out = round_fp8_e4m3(s)
    if not np.all(np.isfinite(out)):
        raise ValueError(f"scale overflows {dtype.value} storage")
    return np.where((out == 0) & (s > 0), dtype.min_positive, out)


@dataclass(frozen=True)
class QuantConfig:
    dtype: QuantDType
    granularity: Granularity = PER_TENSOR
    scale_dtype: ScaleDType = ScaleDType.REAL32
    two_level: bool = False

    def __post_init__(self):
        if self.two_level and self.scale_dtype is not ScaleDType.FP8_E4M3:
            raise ValueError("two-level scaling requires FP8 E4M3 group scales")

    def to_dict(self) -> dict:
        return {
            "dtype": self.dtype.name,
            "granularity": self.granularity.kind,
            "group_size": self.granularity.group_size,
            "scale_dtype": self.scale_dtype.value,
            "two_level": self.two_level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantConfig":
        gran = Granularity(d["granularity"], d.get("group_size"))
        return cls(
            dtype=QuantDType.from_name(d["dtype"]),
            granularity=gran,
            scale_dtype=ScaleDType(d["scale_dtype"]),
            two_level=bool(d.get("two_level", False)),
        )

    def __str__(self) -> str:
        extra = "+tensor" if self.two_level else ""
        return f"{self.dtype}/{self.granularity}/{self.scale_dtype.value}{extra}"


def int4_config() -> QuantConfig:
    return QuantConfig(INT4, Granularity.per_group(64), ScaleDType.REAL16)


def nvfp4_config() -> QuantConfig:
    return QuantConfig(FP4_E2M1, Granularity.per_group(16), ScaleDType.FP8_E4M3, two_level=True)


def int8_act_config() -> QuantConfig:
    return QuantConfig(INT8, PER_TOKEN, ScaleDType.REAL32)


def int8_weight_config() -> QuantConfig:
    return QuantConfig(INT8, PER_CHANNEL_OUT, ScaleDType.REAL32)


def nf4_weight_config() -> QuantConfig:
    return QuantConfig(NF4, Granularity.per_group(64), ScaleDType.REAL16)


# ---------------------------------------------------------------------------
# lattice encode / decode


def lattice_encode(y: np.ndarray, dtype: QuantDType) -> np.ndarray:
    """Map already-scaled values to integer codes (unpacked, see module doc)."""
    if dtype.kind is Kind.INT:
        q = dtype.q_max
        c = np.sign(y) * np.floor(np.abs(y) + 0.5)
        return np.clip(c, -q, q).astype(np.int16)
    if dtype.kind is Kind.NF4:
        return _nearest_index(y, nf4_levels()).astype(np.int16)
    mags = np.array(FP4_E2M1_MAGNITUDES) if dtype.kind is Kind.FP4_E2M1 else fp8_e4m3_magnitudes()
    idx = _nearest_index(np.abs(y), mags)
    sign_bit = 8 if dtype.kind is Kind.FP4_E2M1 else 128
    neg = (y < 0) & (idx > 0)
    return (idx + np.where(neg, sign_bit, 0)).astype(np.int16)


def lattice_decode(codes: np.ndarray, dtype: QuantDType) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if dtype.kind is Kind.INT:
        return codes.astype(np.float64)
    if dtype.kind is Kind.NF4:
        return nf4_levels()[codes]
    if dtype.kind is Kind.FP4_E2M1:
        mags = np.array(FP4_E2M1_MAGNITUDES)[codes & 7]
        return np.where(codes & 8, -mags, mags)
    mags = fp8_e4m3_magnitudes()[codes & 127]
    return np.where(codes & 128, -mags, mags)


def lattice_values(dtype: QuantDType) -> np.ndarray:
    """Every representable value (scale 1) of ``dtype``, ascending."""
    if dtype.kind is Kind.INT:
        q = int(dtype.q_max)
        return np.arange(-q, q + 1, dtype=np.float64)
    if dtype.kind is Kind.NF4:
        return nf4_levels()
    mags = np.array(FP4_E2M1_MAGNITUDES) if dtype.kind is Kind.FP4_E2M1 else fp8_e4m3_magnitudes()
    return np.unique(np.concatenate([-mags, mags]))


def pack_codes(codes: np.ndarray, dtype: QuantDType) -> np.ndarray:
    """Flatten (row-major) and pack unpacked codes into bytes."""
    flat = np.asarray(codes).reshape(-1).astype(np.int64)
    if not dtype.nibble_packed:
        return (flat & 0xFF).astype(np.uint8)
    nib = (flat & 0xF).astype(np.uint8)
    if nib.size % 2:
        nib = np.append(nib, np.uint8(0))
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)


def unpack_codes(packed: np.ndarray, count: int, dtype: QuantDType) -> np.ndarray:
    """Inverse of :func:`pack_codes`; returns a flat int16 array of ``count`` codes."""
    packed = np.asarray(packed, dtype=np.uint8)
    if not dtype.nibble_packed:
        raw = packed[:count].astype(np.int16)
        if dtype.kind is Kind.INT:
            raw = np.where(raw >= 128, raw - 256, raw)
        return raw
    nib = np.empty(packed.size * 2, dtype=np.int16)
    nib[0::2] = packed & 0xF
    nib[1::2] = packed >> 4
    nib = nib[:count]
    if dtype.kind is Kind.INT:
        nib = np.where(nib >= 8, nib - 16, nib)
    return nib


def packed_nbytes(count: int, dtype: QuantDType) -> int:
    return (count + 1) // 2 if dtype.nibble_packed else count


# ---------------------------------------------------------------------------
# scales


def _reduction_axis(cfg: QuantConfig, axis: int) -> int:
    if cfg.granularity.kind == "per_channel_out":
        return 0
    if cfg.granularity.kind == "per_token":
        return 1
    return axis


def scale_shape(shape: tuple[int, int], cfg: QuantConfig, axis: int) -> tuple[int, int]:
    """Shape of the scale grid for a tensor of ``shape`` (natural layout)."""
    rows, cols = shape
    kind = cfg.granularity.kind
    if kind == "per_tensor":
        return (1, 1)
    if kind == "per_channel_out":
        return (1, cols)
    if kind == "per_token":
        return (rows, 1)
    g = cfg.granularity.group_size
    if axis == 0:
        return (-(-rows // g), cols)
    return (rows, -(-cols // g))


def expand_scales(scales: np.ndarray, shape: tuple[int, int], cfg: QuantConfig, axis: int) -> np.ndarray:
    """Broadcast a scale grid to a full ``shape`` array."""
    rows, cols = shape
    if cfg.granularity.kind == "per_group":
        g = cfg.granularity.group_size
        ax = _reduction_axis(cfg, axis)
        scales = np.repeat(scales, g, axis=ax)
        scales = scales[:rows, :cols]
    return np.broadcast_to(scales, shape)


def scope_absmax(t: np.ndarray, cfg: QuantConfig, axis: int) -> np.ndarray:
    """absmax per scale scope, laid out like the scale grid."""
    a = np.abs(t)
    rows, cols = t.shape
    kind = cfg.granularity.kind
    if kind == "per_tensor":
        return np.array([[a.max() if a.size else 0.0]])
    if kind == "per_channel_out":
        return a.max(axis=0, keepdims=True) if rows else np.zeros((1, cols))
    if kind == "per_token":
        return a.max(axis=1, keepdims=True) if cols else np.zeros((rows, 1))
    g = cfg.granularity.group_size
    ax = _reduction_axis(cfg, axis)
    length = t.shape[ax]
    ngroups = -(-length // g)
    if ngroups == 0:
        return np.zeros(scale_shape(t.shape, cfg, axis))
    pad = ngroups * g - length
    if ax == 1:
        padded = np.pad(a, ((0, 0), (0, pad)))
        return padded.reshape(rows, ngroups, g).max(axis=2)
    padded = np.pad(a, ((0, pad), (0, 0)))
    return padded.reshape(ngroups, g, cols).max(axis=1)


def tensor_scale_for(whole_absmax: float, cfg: QuantConfig) -> float | None:
    """Per-tensor FP32 scale of two-level mode, or None when not two-level."""
    if not cfg.two_level:
        return None
    if whole_absmax == 0:
        return 1.0
    ts = float(np.float32(whole_absmax / (cfg.dtype.q_max * FP8_E4M3_MAX)))
    return ts if ts > 0 else float(np.finfo(np.float32).smallest_subnormal)


def scales_from_absmax(amax: np.ndarray, cfg: QuantConfig, tensor_scale: float | None) -> np.ndarray:
    """Stored scale per scope: ``absmax / q_max`` (divided by the tensor scale in
    two-level mode) rounded to the scale dtype; empty scopes get scale 1."""
    denom = cfg.dtype.q_max * (tensor_scale if tensor_scale is not None else 1.0)
    raw = np.where(amax > 0, amax / denom, 1.0)
    return round_scale(raw, cfg.scale_dtype)


# ---------------------------------------------------------------------------
# quantized tensor


@dataclass(frozen=True, eq=False)
class QuantizedTensor:
    """Packed codes plus scales for one 2-D tensor.

    ``scales`` holds the stored (already rounded) scale values as float64 in the
    grid layout given by :func:`scale_shape`. ``axis`` is the reduction axis
    used for grouping.
    """

    codes: np.ndarray
    scales: np.ndarray
    shape: tuple[int, int]
    config: QuantConfig
    axis: int = 1
    tensor_scale: float | None = None
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def size(self) -> int:
        return self.shape[0] * self.shape[1]

    @property
    def short_last_group(self) -> bool:
        if self.config.granularity.kind != "per_group":
            return False
        length = self.shape[_reduction_axis(self.config, self.axis)]
        return length % self.config.granularity.group_size != 0

    def unpacked_codes(self) -> np.ndarray:
        return unpack_codes(self.codes, self.size, self.config.dtype).reshape(self.shape)

    def lattice(self) -> np.ndarray:
        """Decoded lattice values (before scaling)."""
        return lattice_decode(self.unpacked_codes(), self.config.dtype)

    def effective_scales(self) -> np.ndarray:
        s = self.scales
        if self.tensor_scale is not None:
            s = s * self.tensor_scale
        return expand_scales(s, self.shape, self.config, self.axis)

    def dequantize(self) -> Tensor:
        if "deq" not in self._cache:
            out = self.effective_scales() * self.lattice()
            out.flags.writeable = False
            self._cache["deq"] = out
        return self._cache["deq"]

    def equals(self, other: "QuantizedTensor") -> bool:
        return (
            self.shape == other.shape
            and self.config == other.config
            and self.axis == other.axis
            and self.tensor_scale == other.tensor_scale
            and np.array_equal(self.codes, other.codes)
            and self.scales.shape == other.scales.shape
            and np.array_equal(self.scales.view(np.uint64), other.scales.view(np.uint64))
        )


def encode_with_scales(t: np.ndarray, eff: np.ndarray, dtype: QuantDType) -> np.ndarray:
    """Codes for ``t`` given full-shape effective scales ``eff``."""
    return lattice_encode(t / eff, dtype)


def quantize(t, cfg: QuantConfig, axis: int = 1) -> QuantizedTensor:
    """Quantize a 2-D tensor. ``axis`` is the reduction axis (0 for weights,
    1 for activations); it only matters for per-group granularity."""
    t = as_tensor(t)
    if axis not in (0, 1):
        raise ValueError("axis must be 0 or 1")
    axis = _reduction_axis(cfg, axis)
    ts = tensor_scale_for(float(np.abs(t).max()) if t.size else 0.0, cfg)
    scales = scales_from_absmax(scope_absmax(t, cfg, axis), cfg, ts)
    eff = expand_scales(scales * (ts if ts is not None else 1.0), t.shape, cfg, axis)
    codes = encode_with_scales(t, eff, cfg.dtype)
    return QuantizedTensor(
        codes=pack_codes(codes, cfg.dtype),
        scales=scales,
        shape=t.shape,
        config=cfg,
        axis=axis,
        tensor_scale=ts,
    )


def dequantize(q: QuantizedTensor) -> Tensor:
    return np.array(q.dequantize())


def fake_quant(t, cfg: QuantConfig | None, axis: int = 1) -> Tensor:
    """``dequantize(quantize(t))``; ``cfg=None`` passes ``t`` through unchanged."""
    if cfg is None:
        return as_tensor(t)
    return dequantize(quantize(t, cfg, axis))


def quantize_weight(w, cfg: QuantConfig) -> QuantizedTensor:
    return quantize(w, cfg, axis=0)


def fake_quant_weight(w, cfg: QuantConfig | None) -> Tensor:
    return fake_quant(w, cfg, axis=0)


def fake_quant_act(x, cfg: QuantConfig | None) -> Tensor:
    return fake_quant(x, cfg, axis=1)
