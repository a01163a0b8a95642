"""Deterministic property suite behind ``mosaic selftest``.

Every check is seeded and pure, so two runs with the same seed produce
byte-identical artifacts (results JSON plus the chunk-grid CSV). Failures
serialize a replayable counterexample.
"""
from __future__ import annotations

import csv
import io
import json
import random
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .chunker import ChunkConfig, evaluate_peak, search_bottleneck, search_bruteforce
from .errors import ExecutionFault
from .graph import GraphTemplate
from .kernel import GatherGemmProblem, gather_gemm, gemm_reference
from .liveness import analyze, max_live
from .planner import MemoryPlan, PlanEntry, plan_exact, plan_first_fit, validate
from .randgen import random_concrete_graph, random_lifetime_table
from .vmm import execute_plan, reserve
from .workload import build_layer_template, toy_configs

import numpy as np


@dataclass
class CheckResult:
    name: str
    ok: bool
    cases: int
    detail: str
    counterexample: dict | None = None
    elapsed: float = 0.0


# --- chunk-search equivalence grid (shared with the acceptance suite) --------


@dataclass(frozen=True)
class GridRow:
    config: str
    length: int
    mask_ratio: float
    budget: int
    monotone: bool
    feasible: bool
    bf_feasible: bool
    k_logits: int | None
    k_ffn: int | None
    bf_k_logits: int | None
    bf_k_ffn: int | None
    match: bool
    evaluations: int
    bf_evaluations: int


def _strictly_monotone(values: list[int]) -> bool:
    return all(a > b for a, b in zip(values, values[1:]))


def run_chunk_grid(
    lengths: tuple[int, ...] = (1024, 2048, 4096, 8192),
    mask_ratios: tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9),
    k_max: int = 16,
    configs: dict | None = None,
    alignment: int = 256,
) -> list[GridRow]:
    """Sweep budgets across the feasibility boundary for every (config, L, r_m)
    point and compare the bottleneck search against exhaustive brute force."""
    configs = configs or toy_configs()
    rows: list[GridRow] = []
    templates = {name: build_layer_template(cfg) for name, cfg in configs.items()}
    for name, cfg in configs.items():
        template = templates[name]
        for length in lengths:
            for rm in mask_ratios:
                masked = max(1, round(rm * length))
                bindings = {"L": length, "M": masked}
                cache: dict = {}
                base = evaluate_peak(template, bindings, ChunkConfig(1, 1), alignment, cache)
                peak11 = base.total_peak
                floor = base.non_chunkable_peak
                span = max(peak11 - floor, 1)
                budgets = sorted(
                    {
                        max(1, int(floor * 0.9)),
                        floor + span // 4,
                        floor + span // 2,
                        peak11 + peak11 // 4,
                    }
                )
                for budget in budgets:
                    bt = search_bottleneck(template, bindings, budget, alignment, cache=cache)
                    bf = search_bruteforce(
                        template, bindings, budget, k_max=k_max, alignment=alignment, cache=cache
                    )
                    logits_axis = [
                        evaluate_peak(template, bindings, ChunkConfig(k, 1), alignment, cache)
                        .component_peaks.get("logits", 0)
                        for k in range(1, k_max + 1)
                    ]
                    ffn_axis = [
                        evaluate_peak(template, bindings, ChunkConfig(1, k), alignment, cache)
                        .component_peaks.get("ffn", 0)
                        for k in range(1, k_max + 1)
                    ]
                    monotone = _strictly_monotone(logits_axis) and _strictly_monotone(ffn_axis)
                    match = (bt.feasible == bf.feasible) and (
                        not bt.feasible or bt.config == bf.config
                    )
                    rows.append(
                        GridRow(
                            config=name,
                            length=length,
                            mask_ratio=rm,
                            budget=budget,
                            monotone=monotone,
                            feasible=bt.feasible,
                            bf_feasible=bf.feasible,
                            k_logits=bt.config.k_logits if bt.config else None,
                            k_ffn=bt.config.k_ffn if bt.config else None,
                            bf_k_logits=bf.config.k_logits if bf.config else None,
                            bf_k_ffn=bf.config.k_ffn if bf.config else None,
                            match=match,
                            evaluations=bt.evaluations,
                            bf_evaluations=bf.evaluations,
                        )
                    )
    return rows


def grid_violations(rows: list[GridRow]) -> list[str]:
    """Grid points breaking the search-equivalence contract."""
    bad: list[str] = []
    for r in rows:
        where = f"{r.config} L={r.length} rm={r.mask_ratio} budget={r.budget}"
        if r.feasible != r.bf_feasible:
            bad.append(f"{where}: feasibility disagrees (bottleneck {r.feasible}, brute {r.bf_feasible})")
            continue
        if r.monotone and not r.match:
            bad.append(
                f"{where}: configs differ on monotone instance "
                f"(({r.k_logits},{r.k_ffn}) vs ({r.bf_k_logits},{r.bf_k_ffn}))"
            )
        if r.feasible:
            if r.evaluations > r.k_logits + r.k_ffn:
                bad.append(f"{where}: {r.evaluations} evaluations exceed k_l*+k_f*")
            if (r.bf_k_logits + r.bf_k_ffn + 1) < (r.k_logits + r.k_ffn):
                bad.append(f"{where}: bottleneck config more than one split above brute force")
    return bad


def grid_rows_csv(rows: list[GridRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        [
            "config", "L", "r_m", "budget", "monotone", "feasible", "k_logits", "k_ffn",
            "bf_k_logits", "bf_k_ffn", "match", "evaluations", "bf_evaluations",
        ]
    )
    for r in rows:
        writer.writerow(
            [
                r.config, r.length, f"{r.mask_ratio:.1f}", r.budget, int(r.monotone),
                int(r.feasible), r.k_logits if r.k_logits is not None else "",
                r.k_ffn if r.k_ffn is not None else "",
                r.bf_k_logits if r.bf_k_logits is not None else "",
                r.bf_k_ffn if r.bf_k_ffn is not None else "",
                int(r.match), r.evaluations, r.bf_evaluations,
            ]
        )
    return buf.getvalue()


# --- individual checks -------------------------------------------------------


def _graph_counterexample(seed: int, case: int, template: GraphTemplate, bindings: dict) -> dict:
    return {
        "seed": seed,
        "case": case,
        "bindings": bindings,
        "template": template.to_json_dict(),
    }


def check_plan_soundness(seed: int, cases: int = 1000, inject_fault: str | None = None) -> CheckResult:
    rng = random.Random(seed)
    start = time.perf_counter()
    for case in range(cases):
        g = random_concrete_graph(rng)
        table = analyze(g)
        plan = plan_first_fit(table)
        if inject_fault == "planner_off_by_one":
            plan = _corrupt_plan(plan, table)
        report = validate(plan, table)
        if not report.ok:
            v = report.violations[0]
            return CheckResult(
                "plan_soundness", False, case + 1,
                f"violation {v.kind} between {v.group_a} and {v.group_b}: {v.detail}",
                _graph_counterexample(seed, case, g.template, g.bindings),
                time.perf_counter() - start,
            )
        if plan.workspace_size < max_live(table):
            return CheckResult(
                "plan_soundness", False, case + 1,
                "workspace below the max-live lower bound",
                _graph_counterexample(seed, case, g.template, g.bindings),
                time.perf_counter() - start,
            )
    return CheckResult(
        "plan_soundness", True, cases, "validate(plan_first_fit) ok on all graphs",
        None, time.perf_counter() - start,
    )


def _corrupt_plan(plan: MemoryPlan, table) -> MemoryPlan:
    """Force an address overlap between the first pair of time-overlapping groups."""
    groups = [g for g in table.groups if g.size > 0]
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            a, b = groups[i], groups[j]
            if a.def_index <= b.last_use_index and b.def_index <= a.last_use_index:
                offsets = plan.offsets()
                offsets[b.id] = offsets[a.id]
                entries = tuple(
                    PlanEntry(e.group_id, offsets[e.group_id], e.size, e.def_index,
                              e.last_use_index, e.tag)
                    for e in plan.entries
                )
                ws = max((e.offset + e.size for e in entries), default=0)
                return MemoryPlan(plan.alignment, ws, entries)
    return plan


def check_oracle_dominance(seed: int, cases: int = 200) -> CheckResult:
    rng = random.Random(seed + 1)
    start = time.perf_counter()
    for case in range(cases):
        table = random_lifetime_table(rng, max_groups=10)
        ff = plan_first_fit(table)
        exact = plan_exact(table, limit=10)
        if exact.workspace_size > ff.workspace_size:
            return CheckResult(
                "oracle_dominance", False, case + 1,
                f"exact {exact.workspace_size} exceeds first-fit {ff.workspace_size}",
                {"seed": seed + 1, "case": case, "table": [
                    (g.id, g.size, g.def_index, g.last_use_index) for g in table.groups
                ]},
                time.perf_counter() - start,
            )
        if not validate(exact, table).ok:
            return CheckResult(
                "oracle_dominance", False, case + 1, "exact plan invalid",
                {"seed": seed + 1, "case": case}, time.perf_counter() - start,
            )
    # chain-structured stack templates: first-fit == max-live == exact
    for name, cfg in toy_configs().items():
        template = build_layer_template(cfg)
        for length, masked in ((64, 48), (256, 32)):
            g = template.instantiate({"L": length, "M": masked, "K_logits": 2, "K_FFN": 2})
            table = analyze(g)
            ff = plan_first_fit(table, alignment=1)
            exact = plan_exact(table, alignment=1, limit=len(table.groups))
            lo = max_live(table)
            if not (ff.workspace_size == lo == exact.workspace_size):
                return CheckResult(
                    "oracle_dominance", False, cases,
                    f"chain equality broken on {name}: ff={ff.workspace_size} "
                    f"max_live={lo} exact={exact.workspace_size}",
                    None, time.perf_counter() - start,
                )
    return CheckResult(
        "oracle_dominance", True, cases,
        "exact <= first-fit everywhere; equality on chain templates",
        None, time.perf_counter() - start,
    )


def check_chunk_equivalence(
    lengths: tuple[int, ...] = (1024, 4096),
    mask_ratios: tuple[float, ...] = (0.1, 0.5, 0.9),
    k_max: int = 8,
) -> tuple[CheckResult, list[GridRow]]:
    start = time.perf_counter()
    rows = run_chunk_grid(lengths, mask_ratios, k_max=k_max)
    bad = grid_violations(rows)
    if bad:
        return (
            CheckResult(
                "chunk_equivalence", False, len(rows), bad[0],
                {"violations": bad[:10]}, time.perf_counter() - start,
            ),
            rows,
        )
    return (
        CheckResult(
            "chunk_equivalence", True, len(rows),
            "bottleneck search matches brute force across the grid",
            None, time.perf_counter() - start,
        ),
        rows,
    )


def check_kernel_oracle(seed: int, cases: int = 500) -> CheckResult:
    rng = random.Random(seed + 2)
    start = time.perf_counter()
    for case in range(cases):
        n = rng.randint(1, 10)
        d = rng.randint(1, 8)
        vocab = rng.randint(1, 12)
        hidden = np.array(
            [[rng.uniform(-2, 2) for _ in range(d)] for _ in range(n)], dtype=np.float64
        )
        weight = np.array(
            [[rng.uniform(-2, 2) for _ in range(vocab)] for _ in range(d)], dtype=np.float64
        )
        m = rng.randint(1, n)
        idx = tuple(rng.sample(range(n), m))
        tiles = (rng.randint(1, 6), rng.randint(1, 6), rng.randint(1, 6))
        problem = GatherGemmProblem(hidden, weight, idx, *tiles)
        out, scratch = gather_gemm(problem)
        ref = gemm_reference(hidden[list(idx), :], weight)
        err = np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1e-30)) if ref.size else 0.0
        if err > 1e-12:
            return CheckResult(
                "kernel_oracle", False, case + 1, f"relative error {err:.3e} exceeds 1e-12",
                {"seed": seed + 2, "case": case, "shape": [n, d, vocab], "mask": list(idx)},
                time.perf_counter() - start,
            )
        if not scratch.within_bound:
            return CheckResult(
                "kernel_oracle", False, case + 1,
                f"scratch {scratch.peak_elements} exceeds bound {scratch.bound}",
                {"seed": seed + 2, "case": case}, time.perf_counter() - start,
            )
        if case % 50 == 0:
            variants = [
                gather_gemm(GatherGemmProblem(hidden, weight, idx, tm, td, tv))[0]
                for tm, td, tv in ((1, 1, 1), (2, 3, 4), (8, 8, 8), (64, 64, 64))
            ]
            for v in variants[1:]:
                if not np.array_equal(v, variants[0]):
                    return CheckResult(
                        "kernel_oracle", False, case + 1,
                        "tile configurations disagree bitwise",
                        {"seed": seed + 2, "case": case}, time.perf_counter() - start,
                    )
    return CheckResult(
        "kernel_oracle", True, cases,
        "gather_gemm matches the naive oracle; scratch within bound",
        None, time.perf_counter() - start,
    )


def check_vmm_tightness(seed: int, cases: int = 200) -> CheckResult:
    rng = random.Random(seed + 3)
    start = time.perf_counter()
    page = 4096
    for case in range(cases):
        g = random_concrete_graph(rng, max_ops=12)
        table = analyze(g)
        plan = plan_first_fit(table)
        ws = reserve(max(plan.workspace_size, 1) * 2 + page, page_size=page, backend="sim")
        ws.commit_to(plan.workspace_size)
        if ws.committed_bytes - plan.workspace_size >= page:
            return CheckResult(
                "vmm_tightness", False, case + 1,
                f"committed {ws.committed_bytes} overshoots plan {plan.workspace_size} by a page",
                _graph_counterexample(seed + 3, case, g.template, g.bindings),
                time.perf_counter() - start,
            )
        report = execute_plan(ws, plan, g, raise_on_fault=False)
        if not report.ok:
            f = report.faults[0]
            return CheckResult(
                "vmm_tightness", False, case + 1,
                f"execution fault {f.kind} at {f.op} on {f.group}",
                _graph_counterexample(seed + 3, case, g.template, g.bindings),
                time.perf_counter() - start,
            )
    # fault injection: an overlapping plan must be detected
    rng2 = random.Random(seed + 4)
    detected = False
    for _ in range(50):
        g = random_concrete_graph(rng2, max_ops=12)
        table = analyze(g)
        plan = plan_first_fit(table)
        bad = _corrupt_plan(plan, table)
        if bad is plan:
            continue
        ws = reserve(max(bad.workspace_size, 1) + page, page_size=page, backend="sim")
        ws.commit_to(bad.workspace_size)
        try:
            report = execute_plan(ws, bad, g, raise_on_fault=False)
        except ExecutionFault:
            detected = True
            break
        if not report.ok:
            detected = True
            break
    if not detected:
        return CheckResult(
            "vmm_tightness", False, cases, "corrupted plan went undetected",
            None, time.perf_counter() - start,
        )
    return CheckResult(
        "vmm_tightness", True, cases,
        "commit within one page of the plan; executions clean; corruption detected",
        None, time.perf_counter() - start,
    )


def check_allocator_conservation(seed: int, cases: int = 60) -> CheckResult:
    from .allocsim import AllocatorConfig, CachingAllocator

    rng = random.Random(seed + 5)
    start = time.perf_counter()
    for case in range(cases):
        alloc = CachingAllocator(AllocatorConfig(split_threshold=64, segment_granularity=1 << 12))
        live = []
        reserved_prev = 0
        for _ in range(rng.randint(1, 60)):
            if live and rng.random() < 0.45:
                h = live.pop(rng.randrange(len(live)))
                alloc.free(h)
            else:
                live.append(alloc.alloc(rng.randint(1, 8192)))
            try:
                alloc.check_invariants()
            except AssertionError as exc:
                return CheckResult(
                    "allocator_conservation", False, case + 1, f"invariant broken: {exc}",
                    {"seed": seed + 5, "case": case}, time.perf_counter() - start,
                )
            if alloc.reserved_bytes < reserved_prev:
                return CheckResult(
                    "allocator_conservation", False, case + 1,
                    "reserved bytes decreased without release_cache",
                    {"seed": seed + 5, "case": case}, time.perf_counter() - start,
                )
            reserved_prev = alloc.reserved_bytes
    return CheckResult(
        "allocator_conservation", True, cases,
        "segment tiling, coalescing, and caching monotonicity hold",
        None, time.perf_counter() - start,
    )


def run_selftest(
    seed: int,
    out_dir: str | Path | None = None,
    quick: bool = False,
    inject_fault: str | None = None,
) -> tuple[bool, list[CheckResult]]:
    scale = 0.2 if quick else 1.0

    def n(base: int) -> int:
        return max(10, int(base * scale))

    results = [check_plan_soundness(seed, n(1000), inject_fault)]
    results.append(check_oracle_dominance(seed, n(200)))
    grid_check, rows = check_chunk_equivalence()
    results.append(grid_check)
    results.append(check_kernel_oracle(seed, n(500)))
    results.append(check_vmm_tightness(seed, n(200)))
    results.append(check_allocator_conservation(seed, n(60)))
    ok = all(r.ok for r in results)

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "seed": seed,
            "ok": ok,
            "checks": [
                {"name": r.name, "ok": r.ok, "cases": r.cases, "detail": r.detail}
                for r in results
            ],
        }
        _atomic_write(out / "results.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
        _atomic_write(out / "chunk_grid.csv", grid_rows_csv(rows))
        for r in results:
            if not r.ok and r.counterexample is not None:
                _atomic_write(
                    out / "counterexample.json",
                    json.dumps(r.counterexample, indent=2, sort_keys=True) + "\n",
                )
                break
    return ok, results


def _atomic_write(path: Path, content: str) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(content)
    tmp.replace(path)
