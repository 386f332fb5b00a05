"""Command-line entry point: ``sftsim <subcommand> ...``.

Machine-readable output goes to the files named on the command line; short
human summaries go to stdout and diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import config_dict, load_sim_config
from .engine import CONV, DECONV, FAST_DENSE, LayerSpec, run_layer
from .netgraph import GraphError, load_netgraph, simulate_graph
from .oracle import direct, find_tile_alignment, tile_equivalence
from .pruning import BANK_MAGIC, POLICIES, load_bank, prune_layer, save_bank
from .tensors import Tensor, load_tensor, quantize, save_tensor
from .transforms import builtin_conv_f2x2_3x3, builtin_deconv_t3_6x6_4x4, \
    tile_multiplication_count

log = logging.getLogger("sftsim")

TOLERANCE = 1e-12


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _transform_for_kernel(k: int):
    if k == 3:
        return builtin_conv_f2x2_3x3()
    if k == 4:
        return builtin_deconv_t3_6x6_4x4()
    raise ValueError(f"no fast transform for {k}x{k} kernels")


# --- verify-kernels ------------------------------------------------------------

def _layer_check(kind: str, rng) -> float:
    """Fast-dense layer against the direct oracle on a small random layer."""
    spec = LayerSpec(kind, 3, 2, 9, 7, algorithm=FAST_DENSE)
    x = rng.standard_normal((1, 3, 9, 7))
    w = rng.standard_normal((2, 3, spec.k, spec.k))
    got = run_layer(Tensor(x), w, spec).data
    return float(np.abs(got - direct(x, w, spec.params)).max())


def cmd_verify_kernels(args) -> int:
    rng = np.random.default_rng(args.seed)
    result, ok = {"trials": args.trials, "seed": args.seed, "kinds": {}}, True
    for ts in (builtin_conv_f2x2_3x3(), builtin_deconv_t3_6x6_4x4()):
        entry = {"transform": ts.name}
        try:
            al = find_tile_alignment(ts, seed=args.seed)
            entry["offset"] = list(al.offset)
            entry["in_step"], entry["out_step"] = al.in_step, al.out_step
            entry["tile_max_abs_error"] = tile_equivalence(ts, args.trials,
                                                           args.seed)
            entry["layer_max_abs_error"] = _layer_check(
                CONV if ts.kind == "conv" else DECONV, rng)
            mults, dense = tile_multiplication_count(ts)
            entry["mults_per_tile"], entry["dense_mults"] = mults, dense
            entry["pass"] = (entry["tile_max_abs_error"] < TOLERANCE
                             and entry["layer_max_abs_error"] < TOLERANCE)
        except Exception as exc:  # report and keep going
            log.error("%s: %s", ts.name, exc)
            entry["error"] = str(exc)
            entry["pass"] = False
        ok &= entry["pass"]
        result["kinds"][ts.kind] = entry
        print(f"{ts.kind}: max abs error "
              f"{entry.get('tile_max_abs_error', float('nan')):.3g} "
              f"({'ok' if entry['pass'] else 'FAIL'})")
    result["pass"] = ok
    if args.report:
        _write_json(args.report, result)
    return 0 if ok else 1


# --- prune ---------------------------------------------------------------------

def cmd_prune(args) -> int:
    w = load_tensor(args.weights)
    ts = _transform_for_kernel(w.shape[2])
    bank, mask = prune_layer(ts, w, args.rho, args.policy, args.mult_budget)
    save_bank(bank, args.out)
    nnz = bank.nnz().ravel()
    hist = {int(v): int(c) for v, c in zip(*np.unique(nnz, return_counts=True))}
    zeta = np.asarray(mask.zeta, dtype=np.float64).ravel()
    summary = {"transform": ts.name, "rho": args.rho, "policy": args.policy,
               "zeta_min": float(zeta.min()), "zeta_max": float(zeta.max()),
               "nnz_histogram": hist, "kernels": int(nnz.size)}
    print(f"zeta in [{summary['zeta_min']:.6g}, {summary['zeta_max']:.6g}]")
    print("nnz histogram: " + ", ".join(f"{k}:{v}" for k, v in hist.items()))
    if args.report:
        _write_json(args.report, summary)
    return 0


# --- run-layer -----------------------------------------------------------------

def _load_spec(path) -> LayerSpec:
    g = load_netgraph(path)
    if len(g.nodes) != 1:
        raise GraphError(f"{path}: a layer spec file holds exactly one node")
    return next(iter(g.nodes.values()))


def cmd_run_layer(args) -> int:
    spec = _load_spec(args.spec)
    x = load_tensor(args.input)
    raw = Path(args.weights).read_bytes()[:4]
    weights = load_bank(args.weights) if raw == BANK_MAGIC \
        else load_tensor(args.weights)
    if args.fxp:
        if not x.is_fxp:
            x = quantize(x, spec.act_fmt)
        if isinstance(weights, Tensor) and not weights.is_fxp:
            weights = quantize(weights, spec.weight_fmt)
    out = run_layer(x, weights, spec, threads=args.threads)
    if out.saturated:
        log.warning("%d output values saturated", out.saturated)
    save_tensor(out, args.out)
    digest = hashlib.sha256(Path(args.out).read_bytes()).hexdigest()
    print(f"sha256 {digest}")
    return 0


# --- simulate-chain ------------------------------------------------------------

def _trace_csv(parts) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["chain", "cycle", "bank", "state", "feature", "row"])
    for p in parts:
        for row in p.trace_rows():
            w.writerow([p.name, *row])
    return buf.getvalue()


def cmd_simulate_chain(args) -> int:
    scu, buf = load_sim_config(args.config)
    g = load_netgraph(args.graph)
    rep = simulate_graph(g, scu, buf, threads=args.threads,
                         split=not args.greedy, keep_events=bool(args.trace))
    out = rep.to_json()
    out["graph"] = Path(args.graph).name
    out["config"] = config_dict(scu, buf)
    _write_json(args.report, out)
    if args.trace:
        Path(args.trace).write_text(_trace_csv(rep.parts))
    if rep.deadlocked:
        print(f"deadlock in {len(rep.deadlocked)} chain(s); see {args.report}")
        return 1
    print(f"off-chip traffic {rep.traffic} B vs baseline "
          f"{rep.baseline_traffic} B: reduction {100 * rep.reduction:.1f}%")
    if out["fps"]:
        print(f"model estimate {out['frame_seconds'] * 1e3:.2f} ms/frame "
              f"({out['fps']:.1f} FPS; no DRAM stalls modelled)")
    return 0


# --- report --------------------------------------------------------------------

_COLS = ["module", "baseline_bytes", "chained_bytes", "reduction_pct",
         "baseline_cycles", "cycles"]


def merge_reports(docs: list[dict]) -> list[dict]:
    mods: dict[str, dict] = {}
    for doc in docs:
        for tag, m in doc.get("modules", {}).items():
            acc = mods.setdefault(tag, {"baseline_bytes": 0, "chained_bytes": 0,
                                        "baseline_cycles": 0, "cycles": 0})
            acc["baseline_bytes"] += m["baseline_reads"] + m["baseline_writes"]
            acc["chained_bytes"] += m["reads"] + m["writes"]
            acc["baseline_cycles"] += m["baseline_cycles"]
            acc["cycles"] += m["cycles"]
    rows = [{"module": t, **v} for t, v in sorted(mods.items())]
    total = {"module": "total"}
    for key in _COLS[1:]:
        if key != "reduction_pct":
            total[key] = sum(r[key] for r in rows)
    rows.append(total)
    for r in rows:
        b = r["baseline_bytes"]
        r["reduction_pct"] = round(100 * (1 - r["chained_bytes"] / b), 3) if b else 0.0
    return rows


def format_rows(rows: list[dict], fmt: str) -> str:
    if fmt == "json":
        return json.dumps(rows, indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, _COLS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    lines = ["| " + " | ".join(_COLS) + " |",
             "|" + "---|" * len(_COLS)]
    for r in rows:
        lines.append("| " + " | ".join(str(r[c]) for c in _COLS) + " |")
    return "\n".join(lines) + "\n"


def cmd_report(args) -> int:
    docs = [json.loads(Path(p).read_text()) for p in args.inputs]
    text = format_rows(merge_reports(docs), args.format)
    Path(args.out).write_text(text)
    print(f"merged {len(docs)} report(s) into {args.out}")
    return 0


# --- argument parsing ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sftsim", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("verify-kernels", help="fast tiles against the direct oracle")
    s.add_argument("--trials", type=int, default=1000)
    s.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    s.add_argument("--report")
    s.set_defaults(func=cmd_verify_kernels)

    s = sub.add_parser("prune", help="transform, mask and compress a weight tensor")
    s.add_argument("--weights", required=True)
    s.add_argument("--rho", type=float, default=0.5)
    s.add_argument("--policy", choices=POLICIES, default=POLICIES[0])
    s.add_argument("--mult-budget", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_prune)

    s = sub.add_parser("run-layer", help="execute one layer")
    s.add_argument("--spec", required=True, help="graph file with one node")
    s.add_argument("--input", required=True)
    s.add_argument("--weights", required=True, help="tensor or sparse bank file")
    s.add_argument("--out", required=True)
    s.add_argument("--fxp", action="store_true")
    s.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    s.set_defaults(func=cmd_run_layer)

    s = sub.add_parser("simulate-chain", help="chained vs layer-by-layer traffic")
    s.add_argument("--graph", required=True)
    s.add_argument("--config")
    s.add_argument("--report", required=True)
    s.add_argument("--trace")
    s.add_argument("--greedy", action="store_true",
                   help="do not split chains to fit the buffer")
    s.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    s.set_defaults(func=cmd_simulate_chain)

    s = sub.add_parser("report", help="merge simulation reports per module")
    s.add_argument("--inputs", nargs="+", required=True)
    s.add_argument("--format", choices=("json", "csv", "md"), default="md")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        stream=sys.stderr, format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
