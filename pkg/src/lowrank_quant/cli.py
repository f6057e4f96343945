"""Command-line interface.

Every subcommand reads and writes the tensor-file and layer-pack formats in
:mod:`lowrank_quant.io`. Tables go to ``--out`` or standard output as CSV;
diagnostics go to standard error. Exit status is 0 on success, 1 on data
errors and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io as _pyio
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import costmodel, diagnostics, pipeline
from . import io as lqio
from .pipeline import PRESETS
from .tensor import Rng, synth_outlier_matrix

log = logging.getLogger("lowrank_quant")


class UsageError(Exception):
    pass


def fmt(x) -> str:
    """17 significant digits, '.' decimal point, independent of locale."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    if x is None:
        return ""
    return str(x)


def _write_csv(rows: list[list], header: list[str], out: str | None) -> None:
    buf = _pyio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    _emit(buf.getvalue(), out)


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"{what}: expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise UsageError(f"{what}: empty list")
    return vals


def _alpha_options(args) -> dict:
    """Map --alpha / --alpha-grid onto pipeline keyword arguments."""
    if args.alpha is not None:
        if not 0.0 <= args.alpha <= 1.0:
            raise UsageError("--alpha must lie in [0, 1]")
        return {"alpha": args.alpha}
    grid = args.alpha_grid
    if grid is None or grid == "default":
        return {"alpha_grid": pipeline.DEFAULT_ALPHA_GRID}
    if grid == "off":
        return {"smooth": False}
    try:
        vals = [float(v) for v in grid.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--alpha-grid: expected 'default', 'off' or a list of reals, got {grid!r}") from None
    if not vals or any(not 0.0 <= v <= 1.0 for v in vals):
        raise UsageError("--alpha-grid values must lie in [0, 1]")
    return {"alpha_grid": vals}


def _load_pair(args):
    w = lqio.load_tensor(args.weights).astype(np.float64)
    x = lqio.load_tensor(args.calib).astype(np.float64)
    return x, w


def _preset_rank(args):
    preset = PRESETS[args.preset]
    rank = preset.rank if args.rank is None else args.rank
    return preset, rank


# ---------------------------------------------------------------------------
# subcommands


def cmd_quantize(args) -> int:
    preset, rank = _preset_rank(args)
    opts = _alpha_options(args)
    x, w = _load_pair(args)
    layer = pipeline.svdquant(
        x, w, rank, preset.weight_cfg, preset.act_cfg,
        refine_iters=args.iters, use_gptq=args.gptq, **opts,
    )
    out = Path(args.out)
    lqio.save_pack(out, layer, name=args.name)
    rep = diagnostics.layer_report(layer, x, w, "svdquant-GPTQ" if args.gptq else "svdquant-RTN")
    report = rep.to_dict()
    report.update(
        preset=preset.name,
        rank=rank,
        alpha=layer.alpha,
        smoothing=opts.get("smooth", True),
        refine_iters=args.iters,
        chosen_iterate=layer.chosen_iterate,
        history=list(layer.history),
        seed=args.seed,
    )
    (out / "report.json").write_text(_json_text(report))
    log.info("wrote %s (E=%s, alpha=%s)", out, fmt(rep.E), layer.alpha)
    return 0


def cmd_eval(args) -> int:
    layer = lqio.load_pack(args.pack)
    x, w = _load_pair(args)
    if x.shape[1] != layer.shape[0] or w.shape != layer.shape:
        raise ValueError(f"inputs {x.shape} x {w.shape} do not fit a {layer.shape} layer")
    rep = diagnostics.layer_report(layer, x, w, args.scheme)
    _emit(_json_text(rep.to_dict()), args.out)
    return 0


_REPORT_HEADER = ["scheme", "E", "relative_E", "x_norm", "w_err_norm", "x_err_norm", "w_norm"]


def _report_rows(reps):
    return [[getattr(r, h) for h in _REPORT_HEADER] for r in reps]


def cmd_compare(args) -> int:
    preset, rank = _preset_rank(args)
    opts = _alpha_options(args)
    if opts.pop("smooth", True) is False:
        raise UsageError("compare always smooths; use --alpha to fix alpha")
    x, w = _load_pair(args)
    reps = diagnostics.compare_schemes(
        x, w, rank, preset.weight_cfg, preset.act_cfg, refine_iters=args.iters, **opts
    )
    _write_csv(_report_rows(reps), _REPORT_HEADER, args.out)
    return 0


def cmd_spectrum(args) -> int:
    preset, rank = _preset_rank(args)
    opts = _alpha_options(args)
    x, w = _load_pair(args)
    layer = pipeline.svdquant(x, w, rank, preset.weight_cfg, preset.act_cfg, refine_iters=0, **opts)
    sp = diagnostics.spectrum_set(x, w, layer)
    rows = [[i + 1, sp.w[i], sp.w_hat[i], sp.residual[i]] for i in range(sp.w.size)]
    _write_csv(rows, ["index", "sigma_W", "sigma_W_hat", "sigma_R"], args.out)
    return 0


def cmd_ranksweep(args) -> int:
    preset = PRESETS[args.preset]
    ranks = _parse_int_list(args.ranks, "--ranks")
    opts = _alpha_options(args)
    x, w = _load_pair(args)
    pts = diagnostics.rank_sweep(
        x, w, ranks, preset.weight_cfg, preset.act_cfg, refine_iters=args.iters, **opts
    )
    _write_csv([[p.rank, p.relative_E, p.param_overhead] for p in pts], ["rank", "relative_E", "param_overhead"], args.out)
    return 0


def cmd_costmodel(args) -> int:
    shape = _parse_int_list(args.shape, "--shape")
    if len(shape) != 3:
        raise UsageError("--shape expects t,m,n")
    t, m, n = shape
    hw = costmodel.HardwareModel.from_json(args.hw) if args.hw else costmodel.HardwareModel()
    rows = []
    for plan in costmodel.Plan:
        kp = costmodel.KernelPlan(
            plan, t, m, n, args.rank, act_bits=args.act_bits, weight_bits=args.weight_bits,
            group_size=args.group_size,
        )
        tr = costmodel.traffic_bytes(kp, hw.l2_capacity)
        est = costmodel.latency_estimate(kp, hw)
        rows.append([
            plan.value, tr.main_branch, tr.lowrank_extra, tr.lowrank_weights,
            est.seconds, est.baseline_seconds, est.overhead_fraction, est.flop_fraction,
        ])
    header = [
        "plan", "main_bytes", "lowrank_extra_bytes", "lowrank_weight_bytes",
        "seconds", "baseline_seconds", "overhead_fraction", "flop_fraction",
    ]
    _write_csv(rows, header, args.out)
    return 0


def cmd_lora_fuse(args) -> int:
    layer = lqio.load_pack(args.pack)
    a = lqio.load_tensor(args.lora_a).astype(np.float64)
    b = lqio.load_tensor(args.lora_b).astype(np.float64)
    fused = pipeline.lora_fuse(layer, a, b, args.scale)
    name = json.loads((Path(args.pack) / lqio.MANIFEST).read_text()).get("name", "layer")
    lqio.save_pack(args.out, fused, name=name)
    log.info("fused rank-%d adapter: branch rank %d -> %d", a.shape[1], layer.rank, fused.rank)
    return 0


def cmd_synth(args) -> int:
    rng = Rng(args.seed)
    cols = _parse_int_list(args.outliers, "--outliers") if args.outliers else []
    t = synth_outlier_matrix(args.rows, args.cols, cols, args.magnitude, rng)
    lqio.save_tensor(args.out, t)
    return 0


def cmd_selftest(args) -> int:
    from . import acceptance

    only = acceptance.parse_selection(args.only) if args.only else None
    results = acceptance.run(only)
    for r in results:
        print(r.line(), file=sys.stderr)
    failed = [r for r in results if not r.passed]
    print(f"selftest: {len(results) - len(failed)}/{len(results)} criteria passed", file=sys.stderr)
    return 0 if not failed else 1


# ---------------------------------------------------------------------------
# parser


def _add_inputs(p, weights_required=True):
    p.add_argument("--weights", required=weights_required, help="weight tensor file (m x n)")
    p.add_argument("--calib", required=True, help="calibration activations (b x m)")


def _add_method(p, rank=True):
    p.add_argument("--preset", choices=sorted(PRESETS), default="int4")
    if rank:
        p.add_argument("--rank", type=int, default=None, help="low-rank branch rank (preset default)")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--alpha", type=float, default=None, help="fixed migration strength")
    g.add_argument(
        "--alpha-grid", nargs="?", const="default", default=None,
        help="'default' (0, 0.05, ..., 1), 'off' (no smoothing) or a comma list",
    )
    p.add_argument("--iters", type=int, default=pipeline.DEFAULT_REFINE_ITERS, help="refinement iterations")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="lowrank-quant",
        description="Post-training quantization with outlier smoothing and a 16-bit low-rank branch.",
    )
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("quantize", help="quantize one layer into a layer pack")
    _add_inputs(p)
    _add_method(p)
    p.add_argument("--gptq", action="store_true", help="quantize the residual with GPTQ")
    p.add_argument("--seed", type=int, default=0, help="recorded in the report; the pipeline is deterministic")
    p.add_argument("--name", default="layer")
    p.add_argument("--out", required=True, help="output pack directory")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="error report of a layer pack on calibration data")
    p.add_argument("--pack", required=True)
    _add_inputs(p)
    p.add_argument("--scheme", default="svdquant")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="six-scheme error ladder as CSV")
    _add_inputs(p)
    _add_method(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("spectrum", help="singular values of W, W_hat and R as CSV")
    _add_inputs(p)
    _add_method(p)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("ranksweep", help="relative error and parameter overhead per rank")
    _add_inputs(p)
    _add_method(p, rank=False)
    p.add_argument("--ranks", default="16,32,64")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ranksweep)

    p = sub.add_parser("costmodel", help="traffic and latency of unfused and fused plans")
    p.add_argument("--shape", required=True, help="t,m,n")
    p.add_argument("--rank", type=int, required=True)
    p.add_argument("--hw", default=None, help="JSON file with HardwareModel fields")
    p.add_argument("--act-bits", type=int, default=4, choices=(4, 8, 16))
    p.add_argument("--weight-bits", type=int, default=4, choices=(4, 8, 16))
    p.add_argument("--group-size", type=int, default=64)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_costmodel)

    p = sub.add_parser("lora-fuse", help="merge a LoRA adapter into the low-rank branch")
    p.add_argument("--pack", required=True)
    p.add_argument("--lora-a", required=True, help="m x r_l tensor file")
    p.add_argument("--lora-b", required=True, help="r_l x n tensor file")
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lora_fuse)

    p = sub.add_parser("synth", help="write a Gaussian tensor with scaled outlier columns")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--outliers", default="", help="comma list of column indices")
    p.add_argument("--magnitude", type=float, default=50.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("selftest", help="run the acceptance suite")
    p.add_argument("--only", default=None, help="criteria to run, e.g. '1-13' or '2,5'")
    p.set_defaults(func=cmd_selftest)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (lqio.FormatError, ValueError, OSError) as exc:
        print(f"{parser.prog} {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
