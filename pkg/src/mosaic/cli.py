"""Command-line front end: scenario runner and report emitter.

Exit codes: 0 ok, 1 property failure, 2 usage or size limits, 3 infeasible
capacity. Byte arguments accept KiB/MiB/GiB suffixes. Output files are written
atomically (temp file + rename) with '.' decimals and mandatory CSV headers;
MOSAIC_SEED overrides --seed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import time
from pathlib import Path

from .chunker import ChunkConfig, search_bottleneck, search_bruteforce
from .errors import InfeasibleRunError, MosaicError, ParseError, TooLarge
from .graph import load_template
from .kernel import GatherGemmProblem, dense_then_discard, gather_gemm
from .liveness import analyze, max_live
from .planner import PlanStats, plan_exact, plan_first_fit, validate
from .selftest import run_selftest
from .workload import (
    ScenarioConfig,
    build_layer_template,
    find_lmax,
    load_model_config,
    par_curve,
    simulate_run,
)

_SUFFIXES = {"kib": 1 << 10, "mib": 1 << 20, "gib": 1 << 30, "k": 1 << 10}


def parse_bytes(text: str) -> int:
    s = text.strip().lower().replace("_", "")
    for suffix, mult in sorted(_SUFFIXES.items(), key=lambda kv: -len(kv[0])):
        if s.endswith(suffix):
            return int(float(s[: -len(suffix)]) * mult)
    return int(s)


def parse_lengths(text: str) -> list[int]:
    return [parse_bytes(part) for part in text.split(",") if part]


def atomic_write(path: str | Path, content: str) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(content)
    tmp.replace(path)


def _bindings(pairs: list[str]) -> dict[str, int]:
    out: dict[str, int] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ParseError(f"--bind expects SYM=VALUE, got {pair!r}")
        name, value = pair.split("=", 1)
        out[name.strip()] = int(value)
    return out


def cmd_plan(args: argparse.Namespace) -> int:
    template = load_template(args.graph)
    g = template.instantiate(_bindings(args.bind))
    table = analyze(g)
    start = time.perf_counter()
    if args.exact:
        plan = plan_exact(table, alignment=args.align, limit=args.limit)
    else:
        plan = plan_first_fit(table, alignment=args.align)
    elapsed = time.perf_counter() - start
    report = validate(plan, table)
    if not report.ok:
        print(f"plan INVALID: {len(report.violations)} violations", file=sys.stderr)
        return 1
    stats = PlanStats(
        workspace_size=plan.workspace_size,
        lower_bound=max_live(table),
        planning_time=elapsed,
        group_count=len(table.groups),
    )
    if args.output:
        atomic_write(args.output, plan.to_json() + "\n")
    print(
        f"workspace_size={stats.workspace_size} lower_bound={stats.lower_bound} "
        f"groups={stats.group_count} planning_time={stats.planning_time:.6f}s"
    )
    return 0


def cmd_chunk_search(args: argparse.Namespace) -> int:
    cfg = load_model_config(args.model)
    template = build_layer_template(cfg)
    length = args.len
    masked = max(1, round((1.0 - args.rp) * length))
    bindings = {"L": length, "M": masked}
    budget = args.budget - cfg.weights_bytes
    if budget <= 0:
        print(f"budget does not cover weights ({cfg.weights_bytes} bytes)", file=sys.stderr)
        return 3
    cache: dict = {}
    outcome = search_bottleneck(template, bindings, budget, cache=cache)
    payload = outcome.to_json_dict()
    if args.brute:
        brute = search_bruteforce(template, bindings, budget, k_max=args.k_max, cache=cache)
        payload["brute"] = brute.to_json_dict()
        payload["match"] = (outcome.feasible == brute.feasible) and (
            not outcome.feasible or outcome.config == brute.config
        )
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.output:
        atomic_write(args.output, text + "\n")
    print(text)
    if not outcome.feasible:
        print(f"infeasible: floor {outcome.floor} bytes exceeds budget", file=sys.stderr)
        return 3
    return 0


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_model_config(args.model)
    scen = ScenarioConfig(args.len, args.rp, args.steps, args.budget)
    try:
        results = simulate_run(cfg, scen, pin_step0_config=args.pin_step0)
    except InfeasibleRunError as exc:
        print(f"infeasible at step {exc.step_index}: {exc}", file=sys.stderr)
        return 3
    if args.trace:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["step", "op_index", "op_kind", "component", "live_bytes"])
        for r in results:
            for idx, (label, live, tag) in enumerate(r.trace.samples):
                writer.writerow([r.state.index, idx, label, tag, live])
        atomic_write(args.trace, buf.getvalue())
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["L", "r_m", "peak", "avg", "PAR", "peak_component", "k_logits", "k_ffn"])
    for r in results:
        writer.writerow(
            [
                scen.length,
                f"{r.state.mask_ratio:.6f}",
                r.trace.peak,
                f"{r.trace.average:.3f}",
                f"{r.metrics.par:.6f}",
                r.metrics.peak_component,
                r.metrics.k_logits,
                r.metrics.k_ffn,
            ]
        )
    if args.metrics:
        atomic_write(args.metrics, buf.getvalue())
    else:
        print(buf.getvalue(), end="")
    return 0


def cmd_par(args: argparse.Namespace) -> int:
    cfg = load_model_config(args.model)
    points = par_curve(cfg, args.rp, parse_lengths(args.lens), args.budget)
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["L", "PAR_unchunked", "PAR_mosaic", "k_logits", "k_ffn"])
    for p in points:
        writer.writerow(
            [p.length, f"{p.par_unchunked:.6f}", f"{p.par_mosaic:.6f}", p.k_logits, p.k_ffn]
        )
    if args.output:
        atomic_write(args.output, buf.getvalue())
    else:
        print(buf.getvalue(), end="")
    return 0


_FEATURE_ALIASES = {
    "global": "global_plan",
    "global_plan": "global_plan",
    "mask": "mask_only",
    "mask_only": "mask_only",
    "chunk": "chunking",
    "chunking": "chunking",
}


def cmd_lmax(args: argparse.Namespace) -> int:
    cfg = load_model_config(args.model)
    features = []
    for name in args.features.split(","):
        name = name.strip()
        if not name:
            continue
        if name not in _FEATURE_ALIASES:
            raise ParseError(f"unknown feature {name!r}")
        features.append(_FEATURE_ALIASES[name])
    lmax = find_lmax(cfg, args.rp, args.budget, features)
    payload = {
        "model": cfg.name,
        "r_p": args.rp,
        "budget": args.budget,
        "features": features,
        "l_max": lmax,
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.output:
        atomic_write(args.output, text + "\n")
    print(text)
    return 0


def cmd_allocsim(args: argparse.Namespace) -> int:
    from .allocsim import AllocatorConfig, CachingAllocator, run_myopic

    cfg = load_model_config(args.model)
    scen = ScenarioConfig(args.len, args.rp, args.steps)
    allocator = CachingAllocator(
        AllocatorConfig(segment_granularity=args.granularity, split_threshold=args.split_threshold)
    )
    report = run_myopic(cfg, scen, break_policy=args.policy, allocator=allocator)
    if args.events:
        buf = io.StringIO()
        allocator.dump_events_csv(buf)
        atomic_write(args.events, buf.getvalue())
    text = report.to_json()
    if args.output:
        atomic_write(args.output, text + "\n")
    print(text)
    return 0


def cmd_kernel_bench(args: argparse.Namespace) -> int:
    import numpy as np

    rng = np.random.default_rng(args.seed)
    hidden = rng.standard_normal((args.tokens, args.dim))
    weight = rng.standard_normal((args.dim, args.vocab))
    m = max(1, round(args.rm * args.tokens))
    idx = tuple(int(i) for i in rng.choice(args.tokens, size=m, replace=False))
    tiles = parse_lengths(args.tiles)
    problem = GatherGemmProblem(hidden, weight, idx, *tiles)
    start = time.perf_counter()
    out, scratch = gather_gemm(problem)
    t_gather = time.perf_counter() - start
    start = time.perf_counter()
    ref = dense_then_discard(hidden, weight, idx)
    t_dense = time.perf_counter() - start
    err = float(abs(out - ref).max())
    print(
        f"gather_gemm: {t_gather:.4f}s  dense_then_discard: {t_dense:.4f}s  "
        f"masked {m}/{args.tokens} rows  max_abs_diff {err:.3e}\n"
        f"scratch peak {scratch.peak_elements} elements (bound {scratch.bound})"
    )
    return 0


def cmd_selftest(args: argparse.Namespace) -> int:
    ok, results = run_selftest(
        args.seed, out_dir=args.out, quick=args.quick, inject_fault=args.inject_fault
    )
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.ok else "FAIL"
        print(f"{status}  {r.name:<{width}}  cases={r.cases:<5d} {r.elapsed:7.2f}s  {r.detail}")
    print("selftest:", "PASS" if ok else "FAIL", f"(seed {args.seed})")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mosaic",
        description="Memory planning toolkit for diffusion-LM inference",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("plan", help="plan a serialized graph into one workspace")
    p.add_argument("graph")
    p.add_argument("--bind", action="append", default=[], metavar="SYM=VAL")
    p.add_argument("--align", type=parse_bytes, default=256)
    p.add_argument("--exact", action="store_true")
    p.add_argument("--limit", type=int, default=12)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("chunk-search", help="find minimal chunk counts for a budget")
    p.add_argument("model")
    p.add_argument("--len", type=parse_bytes, required=True)
    p.add_argument("--rp", type=float, default=0.5)
    p.add_argument("--budget", type=parse_bytes, required=True)
    p.add_argument("--brute", action="store_true")
    p.add_argument("--k-max", type=int, default=16)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_chunk_search)

    p = sub.add_parser("simulate", help="per-step memory trace of a diffusion run")
    p.add_argument("model")
    p.add_argument("--len", type=parse_bytes, required=True)
    p.add_argument("--rp", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--budget", type=parse_bytes, default=None)
    p.add_argument("--pin-step0", action="store_true")
    p.add_argument("--trace")
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("par", help="peak-to-average ratio across context lengths")
    p.add_argument("model")
    p.add_argument("--rp", type=float, default=0.5)
    p.add_argument("--lens", required=True)
    p.add_argument("--budget", type=parse_bytes, required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_par)

    p = sub.add_parser("lmax", help="largest context length that fits the budget")
    p.add_argument("model")
    p.add_argument("--rp", type=float, default=0.5)
    p.add_argument("--budget", type=parse_bytes, required=True)
    p.add_argument("--features", default="global,mask,chunk")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_lmax)

    p = sub.add_parser("allocsim", help="myopic caching-allocator inflation report")
    p.add_argument("model")
    p.add_argument("--len", type=parse_bytes, required=True)
    p.add_argument("--rp", type=float, default=0.5)
    p.add_argument("--steps", type=int, default=16)
    p.add_argument("--policy", choices=("default", "none"), default="default")
    p.add_argument("--granularity", type=parse_bytes, default=2 << 20)
    p.add_argument("--split-threshold", type=parse_bytes, default=512)
    p.add_argument("--events")
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_allocsim)

    p = sub.add_parser("kernel-bench", help="mask-only gather-GEMM microbenchmark")
    p.add_argument("--tokens", type=parse_bytes, default=1024)
    p.add_argument("--dim", type=int, default=128)
    p.add_argument("--vocab", type=parse_bytes, default=2048)
    p.add_argument("--rm", type=float, default=0.5)
    p.add_argument("--tiles", default="32,32,32")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_kernel_bench)

    p = sub.add_parser("selftest", help="run the deterministic property suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="directory for results.json / chunk_grid.csv")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--inject-fault", choices=("planner_off_by_one",), default=None,
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "seed") and "MOSAIC_SEED" in os.environ:
        args.seed = int(os.environ["MOSAIC_SEED"])
    try:
        return args.func(args)
    except TooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ParseError, FileNotFoundError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleRunError as exc:
        print(f"infeasible at step {exc.step_index}: {exc}", file=sys.stderr)
        return 3
    except MosaicError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
