"""On-disk formats: single-tensor files and layer packs.

Tensor file layout (all integers little-endian)::

    offset  size  field
    0       6     magic  b"SVDQT\\x00"
    6       2     version (u16, = 1)
    8       1     dtype code (u8: 0 = float64, 1 = float32)
    9       1     ndim (u8, = 2)
    10      16    dims (2 x u64)
    26      ...   row-major little-endian payload

A layer pack is a directory holding ``manifest.json`` next to tensor files
for the smoothing factors and the two branch factors, the packed residual
codes as raw bytes, and the residual scales.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .linalg import LowRankPair
from .pipeline import QuantizedLinear, SmoothingSpec
from .quant import QuantConfig, QuantizedTensor, packed_nbytes, scale_shape

MAGIC = b"SVDQT\x00"
VERSION = 1
PACK_FORMAT_VERSION = 1
_HEADER = struct.Struct("<6sHBB2Q")
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}

MANIFEST = "manifest.json"
FILES = {
    "lambda": "lambda.svdqt",
    "l1": "l1.svdqt",
    "l2": "l2.svdqt",
    "residual_codes": "residual_codes.bin",
    "residual_scales": "residual_scales.svdqt",
    "tensor_scale": "tensor_scale.svdqt",
}


class FormatError(ValueError):
    """Malformed tensor file or layer pack."""


def encode_tensor(t, dtype: str = "float64") -> bytes:
    arr = np.asarray(t)
    if arr.ndim == 1:
        arr = arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ValueError("tensor files hold 2-D data")
    if dtype not in ("float64", "float32"):
        raise ValueError(f"unsupported dtype {dtype!r}")
    dt = np.dtype("<f8") if dtype == "float64" else np.dtype("<f4")
    header = _HEADER.pack(MAGIC, VERSION, _CODES[dt], 2, arr.shape[0], arr.shape[1])
    return header + np.ascontiguousarray(arr, dtype=dt).tobytes(order="C")


def decode_tensor(data: bytes, *, source: str = "<bytes>") -> np.ndarray:
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{source}: bad magic")
    if len(data) < _HEADER.size:
        raise FormatError(f"{source}: truncated header ({len(data)} of {_HEADER.size} bytes)")
    _, version, code, ndim, rows, cols = _HEADER.unpack_from(data)
    if version != VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    if code not in _DTYPES:
        raise FormatError(f"{source}: unknown dtype code {code}")
    if ndim != 2:
        raise FormatError(f"{source}: ndim must be 2, got {ndim}")
    dt = _DTYPES[code]
    want = rows * cols * dt.itemsize
    have = len(data) - _HEADER.size
    if have < want:
        raise FormatError(f"{source}: truncated payload ({have} of {want} bytes)")
    if have > want:
        raise FormatError(f"{source}: trailing bytes after payload ({have - want} extra)")
    out = np.frombuffer(data, dtype=dt, count=rows * cols, offset=_HEADER.size)
    return out.reshape(rows, cols).astype(np.float64 if code == 0 else np.float32)


def save_tensor(path, t, dtype: str = "float64") -> None:
    Path(path).write_bytes(encode_tensor(t, dtype))


def load_tensor(path) -> np.ndarray:
    """Read a tensor file. float32 payloads are returned as float32 arrays."""
    p = Path(path)
    return decode_tensor(p.read_bytes(), source=str(p))


# ---------------------------------------------------------------------------
# layer packs


def _manifest(layer: QuantizedLinear, name: str) -> dict:
    m, n = layer.shape
    rq = layer.residual_q
    return {
        "format_version": PACK_FORMAT_VERSION,
        "name": name,
        "m": m,
        "n": n,
        "rank": layer.rank,
        "alpha": layer.alpha,
        "weight_cfg": layer.weight_cfg.to_dict(),
        "act_cfg": None if layer.act_cfg is None else layer.act_cfg.to_dict(),
        "residual_cfg": rq.config.to_dict(),
        "residual_axis": rq.axis,
        "residual_codes_nbytes": int(rq.codes.size),
        "tensor_scale": rq.tensor_scale is not None,
        "calib_error": layer.calib_error,
        "chosen_iterate": layer.chosen_iterate,
    }


def save_pack(directory, layer: QuantizedLinear, name: str = "layer") -> Path:
    """Write ``layer`` into ``directory`` (created if needed)."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rq = layer.residual_q
    save_tensor(d / FILES["lambda"], layer.smoothing.lam.reshape(1, -1))
    save_tensor(d / FILES["l1"], layer.branch.l1)
    save_tensor(d / FILES["l2"], layer.branch.l2)
    (d / FILES["residual_codes"]).write_bytes(np.ascontiguousarray(rq.codes, dtype=np.uint8).tobytes())
    save_tensor(d / FILES["residual_scales"], rq.scales)
    ts_path = d / FILES["tensor_scale"]
    if rq.tensor_scale is not None:
        save_tensor(ts_path, np.array([[rq.tensor_scale]]))
    elif ts_path.exists():
        os.remove(ts_path)
    text = json.dumps(_manifest(layer, name), indent=2, sort_keys=True) + "\n"
    (d / MANIFEST).write_text(text)
    return d


def _expect(arr: np.ndarray, shape: tuple[int, int], what: str) -> np.ndarray:
    if arr.shape != shape:
        raise FormatError(f"{what}: shape {arr.shape} disagrees with manifest {shape}")
    if arr.dtype != np.float64:
        raise FormatError(f"{what}: expected float64 payload")
    return arr


def load_pack(directory) -> QuantizedLinear:
    d = Path(directory)
    try:
        man = json.loads((d / MANIFEST).read_text())
    except FileNotFoundError:
        raise FormatError(f"{d}: missing {MANIFEST}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / MANIFEST}: invalid JSON ({exc})") from None
    for key in ("format_version", "m", "n", "rank", "weight_cfg", "act_cfg", "residual_axis"):
        if key not in man:
            raise FormatError(f"{d / MANIFEST}: missing field {key!r}")
    if man["format_version"] != PACK_FORMAT_VERSION:
        raise FormatError(f"{d / MANIFEST}: unsupported format_version {man['format_version']}")
    m, n, r = int(man["m"]), int(man["n"]), int(man["rank"])
    try:
        wcfg = QuantConfig.from_dict(man["weight_cfg"])
        acfg = None if man["act_cfg"] is None else QuantConfig.from_dict(man["act_cfg"])
        rcfg = QuantConfig.from_dict(man.get("residual_cfg", man["weight_cfg"]))
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{d / MANIFEST}: bad quantization config ({exc})") from None
    axis = int(man["residual_axis"])

    lam = _expect(load_tensor(d / FILES["lambda"]), (1, m), "lambda")[0].copy()
    l1 = _expect(load_tensor(d / FILES["l1"]), (m, r), "l1")
    l2 = _expect(load_tensor(d / FILES["l2"]), (r, n), "l2")
    codes = np.frombuffer((d / FILES["residual_codes"]).read_bytes(), dtype=np.uint8).copy()
    want = packed_nbytes(m * n, rcfg.dtype)
    if codes.size != want:
        raise FormatError(f"residual_codes: {codes.size} bytes, expected {want}")
    scales = _expect(
        load_tensor(d / FILES["residual_scales"]), scale_shape((m, n), rcfg, axis), "residual_scales"
    )
    ts = None
    if man.get("tensor_scale"):
        ts = float(_expect(load_tensor(d / FILES["tensor_scale"]), (1, 1), "tensor_scale")[0, 0])
    if not (np.all(np.isfinite(lam)) and np.all(lam > 0)):
        raise FormatError("lambda: factors must be positive and finite")

    alpha = man.get("alpha")
    rq = QuantizedTensor(codes=codes, scales=scales, shape=(m, n), config=rcfg, axis=axis, tensor_scale=ts)
    return QuantizedLinear(
        smoothing=SmoothingSpec(lam, None if alpha is None else float(alpha)),
        branch=LowRankPair(l1, l2),
        residual_q=rq,
        weight_cfg=wcfg,
        act_cfg=acfg,
        calib_error=man.get("calib_error"),
        chosen_iterate=int(man.get("chosen_iterate", 0)),
    )


def layers_equal(a: QuantizedLinear, b: QuantizedLinear) -> bool:
    """Bitwise equality of everything a pack stores."""

    def same(x, y):
        return x.shape == y.shape and np.array_equal(
            np.ascontiguousarray(x).view(np.uint64), np.ascontiguousarray(y).view(np.uint64)
        )

    return (
        same(a.smoothing.lam, b.smoothing.lam)
        and a.smoothing.alpha == b.smoothing.alpha
        and same(a.branch.l1, b.branch.l1)
        and same(a.branch.l2, b.branch.l2)
        and a.residual_q.equals(b.residual_q)
        and a.weight_cfg == b.weight_cfg
        and a.act_cfg == b.act_cfg
    )
