"""Analytical memory model for diffusion-LM transformer stacks.

Builds graph templates for LLaDA-like and Dream-like layer stacks (eager or
mask-only logits, three output-shift variants), simulates the per-step memory
timeline of a multi-step denoising run, and derives the headline metrics:
peak-to-average ratio, peak-component attribution, and the largest context
length that fits a device budget.

Component tags attribute the wide feature dimensions: tensors proportional to
d_ff carry the ``ffn`` tag and tensors proportional to the vocabulary carry
``logits``; projections back to d_model count as ``hidden``. Model dimensions
shipped in configs/ are illustrative, not measurements.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .chunker import ChunkConfig, evaluate_peak, search_bottleneck
from .dims import const, sym
from .errors import InfeasibleRunError, MosaicError
from .graph import GraphTemplate, new_template
from .liveness import (
    LifetimeTable,
    analyze,
    component_profiles,
    dominant_tags,
    live_profile,
)
from .planner import plan_first_fit

_LOGITS_MODES = ("eager", "mask_only")
_SHIFT_MODES = ("none", "concat", "in_place")


@dataclass(frozen=True)
class MoEConfig:
    n_experts: int
    top_k: int

    def __post_init__(self) -> None:
        if self.n_experts < 1 or self.top_k < 1 or self.top_k > self.n_experts:
            raise ValueError(f"invalid MoE config {self}")


@dataclass(frozen=True)
class ModelConfig:
    name: str
    n_layers: int
    d_model: int
    d_ff: int
    n_heads: int
    vocab_size: int
    element_size: int
    weights_bytes: int
    gated_ffn: bool = True
    logits_mode: str = "mask_only"
    shift_mode: str = "none"
    moe: MoEConfig | None = None
    materialize_scores: bool = False

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "d_ff", "n_heads", "vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.element_size not in (1, 2, 4, 8):
            raise ValueError(f"element_size must be one of 1,2,4,8, got {self.element_size}")
        if self.weights_bytes < 0:
            raise ValueError("weights_bytes must be >= 0")
        if self.logits_mode not in _LOGITS_MODES:
            raise ValueError(f"logits_mode must be one of {_LOGITS_MODES}")
        if self.shift_mode not in _SHIFT_MODES:
            raise ValueError(f"shift_mode must be one of {_SHIFT_MODES}")

    def to_json_dict(self) -> dict:
        out = {
            "name": self.name,
            "n_layers": self.n_layers,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "n_heads": self.n_heads,
            "vocab_size": self.vocab_size,
            "element_size": self.element_size,
            "weights_bytes": self.weights_bytes,
            "gated_ffn": self.gated_ffn,
            "logits_mode": self.logits_mode,
            "shift_mode": self.shift_mode,
            "materialize_scores": self.materialize_scores,
        }
        if self.moe:
            out["moe"] = {"n_experts": self.moe.n_experts, "top_k": self.moe.top_k}
        return out


def model_config_from_json_dict(data: dict) -> ModelConfig:
    moe = data.get("moe")
    return ModelConfig(
        name=data.get("name", "model"),
        n_layers=data["n_layers"],
        d_model=data["d_model"],
        d_ff=data["d_ff"],
        n_heads=data["n_heads"],
        vocab_size=data["vocab_size"],
        element_size=data["element_size"],
        weights_bytes=data["weights_bytes"],
        gated_ffn=data.get("gated_ffn", True),
        logits_mode=data.get("logits_mode", "mask_only"),
        shift_mode=data.get("shift_mode", "none"),
        moe=MoEConfig(moe["n_experts"], moe["top_k"]) if moe else None,
        materialize_scores=data.get("materialize_scores", False),
    )


def load_model_config(path: str) -> ModelConfig:
    with open(path) as f:
        return model_config_from_json_dict(json.load(f))


@dataclass(frozen=True)
class ScenarioConfig:
    length: int  # total context tokens L
    prompt_ratio: float  # r_p in [0, 1)
    steps: int  # diffusion steps N
    budget: int | None = None  # device bytes incl. weights; None disables chunk search
    schedule: str = "linear"

    def __post_init__(self) -> None:
        if self.length < 1:
            raise ValueError("length must be >= 1")
        if not (0.0 <= self.prompt_ratio < 1.0):
            raise ValueError("prompt_ratio must lie in [0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.schedule != "linear":
            raise ValueError("only the linear unmask schedule is supported")
        if self.output_length < 1:
            raise ValueError("output length rounds to zero; increase length or lower prompt_ratio")

    @property
    def output_length(self) -> int:
        return round((1.0 - self.prompt_ratio) * self.length)

    def masked_at(self, step: int) -> int:
        # linear unmasking: all output tokens masked at step 0, none after step N
        return round(self.output_length * (1.0 - step / self.steps))


@dataclass(frozen=True)
class StepState:
    index: int
    masked_count: int
    mask_ratio: float


@dataclass(frozen=True)
class StepTrace:
    samples: tuple[tuple[str, int, str], ...]  # (op label, live bytes, dominant tag)
    peak: int
    average: float


@dataclass(frozen=True)
class TraceMetrics:
    par: float
    peak_component: str
    theoretical_peak: int  # planned workspace for the step
    k_logits: int
    k_ffn: int


@dataclass(frozen=True)
class StepResult:
    state: StepState
    metrics: TraceMetrics
    trace: StepTrace | None = None


def build_layer_template(cfg: ModelConfig) -> GraphTemplate:
    """Transformer-stack template with symbols {L, M, K_logits, K_FFN}.

    Residual-stream updates are in-place ops, so one [L, d_model] buffer lives
    across the whole pass. FFN and logits blocks sit inside chunk loops over
    the token dimension; loop inputs carry barriers spanning the loop. Fused
    attention keeps an [L, d_model] scratch instead of an L x L score matrix
    unless ``materialize_scores`` is set.
    """
    t = new_template(("L", "M", "K_logits", "K_FFN"))
    L, M = sym("L"), sym("M")
    e = cfg.element_size
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    mask_only = cfg.logits_mode == "mask_only"
    rows = M if mask_only else L
    rows_symbol = "M" if mask_only else "L"
    expert_mult = cfg.moe.top_k if cfg.moe else 1

    t.add_tensor("token_ids", (L,), 4, tag="other", graph_input=True)
    t.add_tensor("w_embed", (const(V), const(d)), e, tag="other", graph_input=True)
    if mask_only:
        t.add_tensor("mask_idx", (M,), 4, tag="other", graph_input=True)
    t.add_tensor("h", (L, const(d)), e, tag="hidden")
    t.add_op("embed", ("token_ids", "w_embed"), ("h",), kind="embed")
    h = "h"

    for i in range(cfg.n_layers):
        p = f"l{i}."
        t.add_tensor(p + "w_qkv", (const(d), const(3 * d)), e, tag="other", graph_input=True)
        t.add_tensor(p + "w_attn_out", (const(d), const(d)), e, tag="other", graph_input=True)
        for name in ("q", "k", "v"):
            t.add_tensor(p + name, (L, const(d)), e, tag="attention")
            t.add_op(p + name + "_proj", (h, p + "w_qkv"), (p + name,), kind="matmul")
        if cfg.materialize_scores:
            t.add_tensor(p + "scores", (L, L), e, tag="attention")
            t.add_op(p + "attn_scores", (p + "q", p + "k"), (p + "scores",), kind="matmul")
            t.add_tensor(p + "attn_mix", (L, const(d)), e, tag="attention")
            t.add_op(p + "attn_mix_op", (p + "scores", p + "v"), (p + "attn_mix",), kind="matmul")
        else:
            t.add_tensor(p + "attn_mix", (L, const(d)), e, tag="attention")
            t.add_op(
                p + "attn_fused", (p + "q", p + "k", p + "v"), (p + "attn_mix",),
                kind="fused_attention",
            )
        t.add_tensor(p + "attn_out", (L, const(d)), e, tag="attention")
        t.add_op(p + "attn_proj", (p + "attn_mix", p + "w_attn_out"), (p + "attn_out",), kind="matmul")
        t.add_tensor(p + "h_attn", (L, const(d)), e, tag="hidden")
        t.add_op(
            p + "attn_res", (h, p + "attn_out"), (p + "h_attn",), kind="add",
            in_place={p + "h_attn": h},
        )

        t.add_tensor(p + "w_up", (const(d), const(f)), e, tag="other", graph_input=True)
        if cfg.gated_ffn:
            t.add_tensor(p + "w_gate", (const(d), const(f)), e, tag="other", graph_input=True)
        t.add_tensor(p + "w_down", (const(f), const(d)), e, tag="other", graph_input=True)
        t.add_tensor(p + "ffn_acc", (L, const(d)), e, tag="hidden")
        t.add_op(p + "ffn_acc_init", (), (p + "ffn_acc",), kind="alloc")

        up_rows = L * const(expert_mult) if expert_mult > 1 else L
        body: list[str] = []
        t.add_tensor(p + "up", (up_rows, const(f)), e, tag="ffn")
        body.append(t.add_op(p + "ffn_up", (p + "h_attn", p + "w_up"), (p + "up",), kind="ffn_up"))
        t.add_tensor(p + "act", (up_rows, const(f)), e, tag="ffn")
        if cfg.gated_ffn:
            t.add_tensor(p + "gate", (up_rows, const(f)), e, tag="ffn")
            body.append(
                t.add_op(p + "ffn_gate", (p + "h_attn", p + "w_gate"), (p + "gate",), kind="ffn_gate")
            )
            body.append(
                t.add_op(
                    p + "ffn_act", (p + "up", p + "gate"), (p + "act",), kind="glu",
                    in_place={p + "act": p + "up"},
                )
            )
        else:
            body.append(
                t.add_op(
                    p + "ffn_act", (p + "up",), (p + "act",), kind="activation",
                    in_place={p + "act": p + "up"},
                )
            )
        t.add_tensor(p + "down", (L, const(d)), e, tag="hidden")
        body.append(t.add_op(p + "ffn_down", (p + "act", p + "w_down"), (p + "down",), kind="ffn_down"))
        body.append(
            t.add_op(p + "ffn_write", (p + "down", p + "ffn_acc"), (), kind="chunk_write")
        )
        t.add_chunk_loop(body, "K_FFN", ("L",))
        t.add_barrier((p + "h_attn", p + "ffn_acc"), release_after_op=body[-1])
        t.add_tensor(p + "h_out", (L, const(d)), e, tag="hidden")
        t.add_op(
            p + "ffn_res", (p + "h_attn", p + "ffn_acc"), (p + "h_out",), kind="add",
            in_place={p + "h_out": p + "h_attn"},
        )
        h = p + "h_out"

    t.add_tensor("w_vocab", (const(d), const(V)), e, tag="other", graph_input=True)
    t.add_tensor("logits", (rows, const(V)), e, tag="logits")
    concat = cfg.shift_mode == "concat"
    if concat:
        t.add_tensor("logits_all", (rows, const(V)), e, tag="logits")
        t.add_op("logits_all_init", (), ("logits_all",), kind="alloc")
    t.add_tensor("token_out", (rows,), 4, tag="other")
    t.add_tensor("confidence", (rows,), 4, tag="other")
    if not concat:
        t.add_op("token_out_init", (), ("token_out",), kind="alloc")
        t.add_op("confidence_init", (), ("confidence",), kind="alloc")

    lg_inputs = (h, "mask_idx", "w_vocab") if mask_only else (h, "w_vocab")
    body = [
        t.add_op(
            "logits_proj", lg_inputs, ("logits",),
            kind="gather_logits" if mask_only else "logits",
        )
    ]
    sample_src = "logits"
    if cfg.shift_mode == "in_place":
        t.add_tensor("logits_shift", (rows, const(V)), e, tag="logits")
        body.append(
            t.add_op(
                "logits_shift_op", ("logits",), ("logits_shift",), kind="shift",
                in_place={"logits_shift": "logits"},
            )
        )
        sample_src = "logits_shift"
    if concat:
        body.append(t.add_op("logits_concat", ("logits", "logits_all"), (), kind="chunk_write"))
    else:
        body.append(
            t.add_op("sample", (sample_src, "token_out", "confidence"), (), kind="sample")
        )
    t.add_chunk_loop(body, "K_logits", (rows_symbol,))
    loop_inputs = [h] + (["logits_all"] if concat else ["token_out", "confidence"])
    t.add_barrier(loop_inputs, release_after_op=body[-1])
    if concat:
        t.add_op("sample", ("logits_all",), ("token_out", "confidence"), kind="sample")
    t.add_op("commit", ("token_out", "confidence"), (), kind="commit")
    return t.freeze()


def step_trace(table: LifetimeTable, graph_ops: Sequence, plan_workspace: int,
               config: ChunkConfig) -> tuple[StepTrace, TraceMetrics]:
    profile = live_profile(table)
    tags = dominant_tags(table)
    samples = tuple(
        (graph_ops[t].label, profile[t], tags[t]) for t in range(len(profile))
    )
    peak = max(profile) if profile else 0
    average = sum(profile) / len(profile) if profile else 0.0
    trace = StepTrace(samples=samples, peak=peak, average=average)
    # peak component: the tag whose own peak is largest (bottleneck attribution)
    comp = component_profiles(table)
    order = {"logits": 0, "ffn": 1, "attention": 2, "hidden": 3, "other": 4}
    peak_component = "other"
    best = -1
    for tag in sorted(comp, key=lambda t: order.get(t, 9)):
        v = max(comp[tag]) if comp[tag] else 0
        if v > best:
            best = v
            peak_component = tag
    metrics = TraceMetrics(
        par=(peak / average) if average > 0 else 1.0,
        peak_component=peak_component,
        theoretical_peak=plan_workspace,
        k_logits=config.k_logits,
        k_ffn=config.k_ffn,
    )
    return trace, metrics


def simulate_run(
    cfg: ModelConfig,
    scen: ScenarioConfig,
    alignment: int = 256,
    pin_step0_config: bool = False,
    keep_traces: bool = True,
) -> list[StepResult]:
    """Per-step memory simulation under the linear unmask schedule.

    With a budget, the chunk search runs lazily per step (or once at step 0
    when pinned); without one, chunking stays disabled at (1,1).
    """
    template = build_layer_template(cfg)
    act_budget = None
    if scen.budget is not None:
        act_budget = scen.budget - cfg.weights_bytes
        if act_budget <= 0:
            raise InfeasibleRunError(
                f"budget {scen.budget} does not even cover weights {cfg.weights_bytes}",
                step_index=0,
            )

    results: list[StepResult] = []
    pinned: ChunkConfig | None = None
    for n in range(scen.steps):
        masked = scen.masked_at(n)
        state = StepState(index=n, masked_count=masked, mask_ratio=masked / scen.length)
        bindings = {"L": scen.length, "M": masked}
        if act_budget is None:
            config = ChunkConfig(1, 1)
        elif pin_step0_config and pinned is not None:
            config = pinned
        else:
            outcome = search_bottleneck(template, bindings, act_budget, alignment)
            if not outcome.feasible:
                raise InfeasibleRunError(
                    f"step {n} cannot fit budget (floor {outcome.floor} bytes)",
                    step_index=n,
                    floor=outcome.floor,
                )
            config = outcome.config
            if pinned is None:
                pinned = config
        g = template.instantiate(
            {**bindings, "K_logits": config.k_logits, "K_FFN": config.k_ffn}
        )
        table = analyze(g)
        plan = plan_first_fit(table, alignment)
        trace, metrics = step_trace(table, g.ops, plan.workspace_size, config)
        results.append(StepResult(state, metrics, trace if keep_traces else None))
    return results


def find_lmax(
    cfg: ModelConfig,
    prompt_ratio: float,
    budget: int,
    features: Iterable[str] = ("global_plan", "mask_only", "chunking"),
    alignment: int = 256,
    l_cap: int = 1 << 24,
) -> int:
    """Largest context length whose step-0 peak plus weights fits the budget.

    ``features`` selects the pipeline: ``global_plan`` plans the whole step in
    one workspace (otherwise per-subgraph myopic planning feeds the caching
    allocator and its reserved bytes are charged), ``mask_only`` computes
    logits for masked tokens only, ``chunking`` enables the lazy chunk search.
    Binary search over L; peak monotonicity in L is asserted across probes.
    """
    feats = set(features)
    unknown = feats - {"global_plan", "mask_only", "chunking"}
    if unknown:
        raise ValueError(f"unknown features {sorted(unknown)}")
    if "chunking" in feats and "global_plan" not in feats:
        raise ValueError("chunking requires global_plan (the search invokes the planner)")
    if budget <= cfg.weights_bytes:
        return 0

    variant = replace(cfg, logits_mode="mask_only" if "mask_only" in feats else "eager")
    template = build_layer_template(variant)
    act_budget = budget - cfg.weights_bytes
    probes: dict[int, tuple[bool, int]] = {}

    def probe(length: int) -> bool:
        if length in probes:
            return probes[length][0]
        masked = max(1, round((1.0 - prompt_ratio) * length))
        bindings = {"L": length, "M": masked}
        if "global_plan" not in feats:
            from .allocsim import myopic_step_reserved  # deferred: allocsim builds on workload

            peak = myopic_step_reserved(variant, length, masked, alignment=alignment)
            feasible = peak <= act_budget
        elif "chunking" in feats:
            outcome = search_bottleneck(template, bindings, act_budget, alignment)
            feasible = outcome.feasible
            peak = outcome.final_peak if outcome.feasible else max(outcome.floor, outcome.final_peak)
        else:
            peak = evaluate_peak(template, bindings, ChunkConfig(1, 1), alignment).total_peak
            feasible = peak <= act_budget
        probes[length] = (feasible, peak)
        return feasible

    if not probe(1):
        return 0
    lo = 1
    hi = 1
    while probe(hi) and hi < l_cap:
        lo = hi
        hi *= 2
    if hi >= l_cap and probe(hi):
        return hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if probe(mid):
            lo = mid
        else:
            hi = mid
    _assert_monotone(probes)
    return lo


def _assert_monotone(probes: dict[int, tuple[bool, int]]) -> None:
    items = sorted(probes.items())
    last_feasible = True
    for _, (feasible, _) in items:
        if feasible and not last_feasible:
            raise MosaicError("peak is not monotone in L: feasibility recovered at larger L")
        last_feasible = feasible
    # peaks are comparable only within one pipeline, which is the case here
    peaks = [p for _, (_, p) in items]
    for a, b in zip(peaks, peaks[1:]):
        if b < a:
            raise MosaicError("peak is not monotone in L")


@dataclass(frozen=True)
class ParPoint:
    length: int
    par_unchunked: float
    par_mosaic: float
    k_logits: int
    k_ffn: int


def par_curve(
    cfg: ModelConfig,
    prompt_ratio: float,
    lengths: Sequence[int],
    budget: int,
    alignment: int = 256,
) -> list[ParPoint]:
    """Step-0 PAR with the full pipeline (mask-only + lazy chunking under the
    budget) against the eager unchunked baseline, per context length."""
    if not lengths:
        raise ValueError("need at least one context length")
    if any(length < 1 for length in lengths):
        raise ValueError("context lengths must be >= 1")
    points: list[ParPoint] = []
    for length in lengths:
        base = simulate_run(
            replace(cfg, logits_mode="eager"),
            ScenarioConfig(length, prompt_ratio, steps=1, budget=None),
            alignment,
            keep_traces=False,
        )[0]
        tuned = simulate_run(
            replace(cfg, logits_mode="mask_only"),
            ScenarioConfig(length, prompt_ratio, steps=1, budget=budget),
            alignment,
            keep_traces=False,
        )[0]
        points.append(
            ParPoint(
                length=length,
                par_unchunked=base.metrics.par,
                par_mosaic=tuned.metrics.par,
                k_logits=tuned.metrics.k_logits,
                k_ffn=tuned.metrics.k_ffn,
            )
        )
    return points


def toy_configs() -> dict[str, ModelConfig]:
    """Small illustrative configs used by the self-test and acceptance grids."""
    return {
        "toy_gated": ModelConfig(
            name="toy_gated", n_layers=2, d_model=8, d_ff=32, n_heads=2, vocab_size=100,
            element_size=4, weights_bytes=1 << 20, gated_ffn=True,
            logits_mode="mask_only", shift_mode="none",
        ),
        "toy_shift": ModelConfig(
            name="toy_shift", n_layers=3, d_model=16, d_ff=64, n_heads=4, vocab_size=160,
            element_size=2, weights_bytes=2 << 20, gated_ffn=True,
            logits_mode="mask_only", shift_mode="in_place",
        ),
        "toy_moe": ModelConfig(
            name="toy_moe", n_layers=2, d_model=8, d_ff=16, n_heads=2, vocab_size=120,
            element_size=4, weights_bytes=1 << 20, gated_ffn=False,
            logits_mode="mask_only", shift_mode="none", moe=MoEConfig(n_experts=4, top_k=2),
        ),
    }
