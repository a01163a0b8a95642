"""Chunk-count selection for peak operators.

Chunking is disabled by default (config (1,1)) and activated only when the
planned peak exceeds the budget. The bottleneck-driven search targets the
component with the highest peak, increments its chunk count by one, and
re-evaluates by instantiating the template and invoking the planner, halting
as soon as the peak fits or the non-chunkable floor proves the budget
unreachable. The brute-force search exists to verify it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, MutableMapping

from .graph import GraphTemplate
from .liveness import analyze
from .planner import plan_first_fit

K_LOGITS = "K_logits"
K_FFN = "K_FFN"

# component tag -> the trip-count symbol that chunks it
SYMBOL_FOR_TAG = {"logits": K_LOGITS, "ffn": K_FFN}

_TAG_ORDER = {"logits": 0, "ffn": 1, "attention": 2, "hidden": 3, "other": 4}


@dataclass(frozen=True)
class ChunkConfig:
    k_logits: int = 1
    k_ffn: int = 1

    def __post_init__(self) -> None:
        if self.k_logits < 1 or self.k_ffn < 1:
            raise ValueError(f"chunk counts must be >= 1, got {self}")

    def bump(self, tag: str) -> "ChunkConfig":
        if tag == "logits":
            return ChunkConfig(self.k_logits + 1, self.k_ffn)
        if tag == "ffn":
            return ChunkConfig(self.k_logits, self.k_ffn + 1)
        raise ValueError(f"component {tag!r} is not chunkable")

    def k_for(self, tag: str) -> int:
        return self.k_logits if tag == "logits" else self.k_ffn


@dataclass(frozen=True)
class PeakReport:
    total_peak: int  # planner workspace for the instantiated graph
    timeline_peak: int  # max simultaneously-live bytes
    component_peaks: dict[str, int]  # each tag's own live peak over the timeline
    bottleneck: str  # tag with the largest component peak
    peak_instant_live: dict[str, int]  # live bytes per tag at the peak instant
    non_chunkable_peak: int  # max live bytes over groups no chunk count can shrink


@dataclass(frozen=True)
class SearchOutcome:
    config: ChunkConfig | None
    feasible: bool
    evaluations: int
    final_peak: int
    floor: int
    overhead_score: float
    reason: str  # "fits" | "floor" | "saturated" | "capped" | "exhausted"

    def to_json_dict(self) -> dict:
        return {
            "k_logits": self.config.k_logits if self.config else None,
            "k_ffn": self.config.k_ffn if self.config else None,
            "evaluations": self.evaluations,
            "final_peak": self.final_peak,
            "floor": self.floor,
            "feasible": self.feasible,
            "overhead_score": self.overhead_score,
            "reason": self.reason,
        }


def _overhead_score(config: ChunkConfig, launch_overhead: float) -> float:
    # abstract per-extra-launch cost; (1,1) scores zero
    return (config.k_logits + config.k_ffn - 2) * launch_overhead


def evaluate_peak(
    template: GraphTemplate,
    bindings: Mapping[str, int],
    config: ChunkConfig,
    alignment: int = 256,
    cache: MutableMapping[tuple[int, int], PeakReport] | None = None,
) -> PeakReport:
    """Instantiate with the given chunk counts, run liveness + first-fit, and
    attribute the peak to component tags."""
    key = (config.k_logits, config.k_ffn)
    if cache is not None and key in cache:
        return cache[key]

    bound = dict(bindings)
    if K_LOGITS in template.symbols:
        bound[K_LOGITS] = config.k_logits
    if K_FFN in template.symbols:
        bound[K_FFN] = config.k_ffn
    g = template.instantiate(bound)
    table = analyze(g)
    plan = plan_first_fit(table, alignment)

    # one fused sweep: total/per-tag/non-chunkable live profiles, the peak, and
    # the per-tag byte breakdown at the first peak instant
    horizon = table.length
    tot = [0] * (horizon + 1)
    flr = [0] * (horizon + 1)
    tag_deltas: dict[str, list[int]] = {}
    for grp in table.groups:
        size = grp.size
        d, u = grp.def_index, grp.last_use_index + 1
        tot[d] += size
        tot[u] -= size
        td = tag_deltas.get(grp.tag)
        if td is None:
            td = tag_deltas[grp.tag] = [0] * (horizon + 1)
        td[d] += size
        td[u] -= size
        if grp.chunkable_symbol not in (K_LOGITS, K_FFN):
            flr[d] += size
            flr[u] -= size
    tags = list(tag_deltas)
    running = dict.fromkeys(tags, 0)
    component_peaks = dict.fromkeys(tags, 0)
    peak_instant_live = dict.fromkeys(tags, 0)
    timeline_peak = floor = tot_run = flr_run = 0
    for t in range(horizon):
        tot_run += tot[t]
        flr_run += flr[t]
        if flr_run > floor:
            floor = flr_run
        at_new_peak = tot_run > timeline_peak
        if at_new_peak:
            timeline_peak = tot_run
        for tag in tags:
            v = running[tag] + tag_deltas[tag][t]
            running[tag] = v
            if v > component_peaks[tag]:
                component_peaks[tag] = v
        if at_new_peak:
            peak_instant_live = dict(running)

    bottleneck = "other"
    best = -1
    for tag in sorted(component_peaks, key=lambda t: _TAG_ORDER.get(t, 9)):
        if component_peaks[tag] > best:
            best = component_peaks[tag]
            bottleneck = tag

    report = PeakReport(
        total_peak=plan.workspace_size,
        timeline_peak=timeline_peak,
        component_peaks=component_peaks,
        bottleneck=bottleneck,
        peak_instant_live=peak_instant_live,
        non_chunkable_peak=floor,
    )
    if cache is not None:
        cache[key] = report
    return report


def _chunkable_tags(template: GraphTemplate) -> frozenset[str]:
    symbols = {loop.trip_symbol for loop in template.chunk_loops}
    return frozenset(tag for tag, s in SYMBOL_FOR_TAG.items() if s in symbols)


def search_bottleneck(
    template: GraphTemplate,
    bindings: Mapping[str, int],
    budget: int,
    alignment: int = 256,
    k_cap: int = 4096,
    launch_overhead: float = 1.0,
    cache: MutableMapping[tuple[int, int], PeakReport] | None = None,
) -> SearchOutcome:
    """Online bottleneck-driven search for the minimal sufficient chunk counts.

    Starts at (1,1); whenever the peak fits, stops immediately (the lazy
    default never pays chunking overhead when memory suffices). Otherwise the
    chunk count of the bottleneck component is incremented by one and the peak
    re-evaluated, until it fits or the non-chunkable floor rules the budget out.
    """
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    if cache is None:
        cache = {}
    chunkable = _chunkable_tags(template)
    config = ChunkConfig(1, 1)
    evaluations = 0
    floor = 0

    while True:
        report = evaluate_peak(template, bindings, config, alignment, cache)
        evaluations += 1
        floor = report.non_chunkable_peak
        if report.total_peak <= budget:
            return SearchOutcome(
                config, True, evaluations, report.total_peak, floor,
                _overhead_score(config, launch_overhead), "fits",
            )
        if floor > budget or not chunkable:
            # the peak cannot drop below the non-chunkable components
            return SearchOutcome(
                None, False, evaluations, report.total_peak, floor,
                _overhead_score(config, launch_overhead), "floor",
            )
        # target the chunkable component carrying the most bytes at the peak
        # instant: shrinking anything else yields zero gain on the peak
        target = min(
            chunkable,
            key=lambda tag: (-report.peak_instant_live.get(tag, 0), _TAG_ORDER.get(tag, 9)),
        )
        if report.peak_instant_live.get(target, 0) == 0:
            # peak instant holds only non-chunkable bytes; no split can help
            return SearchOutcome(
                None, False, evaluations, report.total_peak, floor,
                _overhead_score(config, launch_overhead), "floor",
            )
        if config.k_for(target) >= k_cap:
            return SearchOutcome(
                None, False, evaluations, report.total_peak, floor,
                _overhead_score(config, launch_overhead), "capped",
            )
        config = config.bump(target)


def search_bruteforce(
    template: GraphTemplate,
    bindings: Mapping[str, int],
    budget: int,
    k_max: int = 64,
    objective: str = "sum",
    alignment: int = 256,
    launch_overhead: float = 1.0,
    cache: MutableMapping[tuple[int, int], PeakReport] | None = None,
) -> SearchOutcome:
    """Exhaustively evaluate every (k_logits, k_ffn) in [1, k_max]^2 and return
    the feasible config minimizing the objective (fewest total splits by
    default, ``max`` for the largest single split), ties broken lexicographically."""
    if budget <= 0:
        raise ValueError(f"budget must be positive, got {budget}")
    if k_max < 1:
        raise ValueError(f"k_max must be >= 1, got {k_max}")
    if objective not in ("sum", "max"):
        raise ValueError(f"unknown objective {objective!r}")
    if cache is None:
        cache = {}

    best: tuple[int, tuple[int, int]] | None = None
    best_peak = 0
    floor = 0
    evaluations = 0
    for kl in range(1, k_max + 1):
        for kf in range(1, k_max + 1):
            report = evaluate_peak(template, bindings, ChunkConfig(kl, kf), alignment, cache)
            evaluations += 1
            floor = max(floor, report.non_chunkable_peak)
            if report.total_peak <= budget:
                score = kl + kf if objective == "sum" else max(kl, kf)
                key = (score, (kl, kf))
                if best is None or key < best:
                    best = key
                    best_peak = report.total_peak
    if best is None:
        return SearchOutcome(None, False, evaluations, 0, floor, 0.0, "exhausted")
    config = ChunkConfig(*best[1])
    return SearchOutcome(
        config, True, evaluations, best_peak, floor,
        _overhead_score(config, launch_overhead), "fits",
    )
