"""Post-training quantization of linear layers with outlier smoothing, a
16-bit low-rank branch and a low-bit residual."""

from .linalg import LowRankPair, SvdResult, svd, truncated_svd
from .pipeline import (
    PRESETS,
    QuantizedLinear,
    SmoothingSpec,
    apply_smoothing,
    compute_smoothing,
    forward,
    gptq_quantize_residual,
    lora_fuse,
    lorc_baseline,
    search_alpha,
    svdquant,
)
from .quant import QuantConfig, QuantDType, QuantizedTensor, dequantize, fake_quant, quantize
from .tensor import Rng, as_tensor, matmul

__version__ = "0.1.0"

__all__ = [
    "LowRankPair",
    "PRESETS",
    "QuantConfig",
    "QuantDType",
    "QuantizedLinear",
    "QuantizedTensor",
    "Rng",
    "SmoothingSpec",
    "SvdResult",
    "apply_smoothing",
    "as_tensor",
    "compute_smoothing",
    "dequantize",
    "fake_quant",
    "forward",
    "gptq_quantize_residual",
    "lora_fuse",
    "lorc_baseline",
    "matmul",
    "quantize",
    "search_alpha",
    "svd",
    "svdquant",
    "truncated_svd",
]
