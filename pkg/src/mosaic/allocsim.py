"""Caching segment allocator and the myopic per-subgraph planner that drives it.

The allocator mimics framework behavior: best-fit over cached free blocks,
block splitting above a threshold, segment-granularity rounding on miss, and
no cross-segment coalescing, so freed fragments that cannot merge force fresh
segments and reserved memory inflates past the theoretical peak. The myopic
runner partitions each step's op timeline at graph breaks, plans every
subgraph locally, and rents one arena per subgraph from the allocator while
boundary-crossing tensors get individual allocations.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import IO, Callable, Sequence

from .chunker import ChunkConfig
from .errors import UsageError
from .graph import ConcreteGraph
from .liveness import LifetimeTable, StorageGroup, analyze
from .planner import plan_first_fit
from .workload import ModelConfig, ScenarioConfig, build_layer_template

MiB = 1 << 20


def _round_up(x: int, step: int) -> int:
    return -(-x // step) * step


@dataclass(frozen=True)
class AllocatorConfig:
    split_threshold: int = 512
    segment_granularity: int = 2 * MiB


@dataclass
class Block:
    offset: int
    size: int
    free: bool


@dataclass
class Segment:
    id: int
    size: int
    blocks: list[Block]


@dataclass(frozen=True)
class BlockHandle:
    segment_id: int
    offset: int
    size: int


@dataclass(frozen=True)
class AllocEvent:
    index: int
    op: str  # "alloc" | "free" | "new_segment" | "release_cache"
    bytes: int
    segment_id: int
    offset: int
    reserved: int
    allocated: int


class CachingAllocator:
    """Deterministic best-fit allocator over cached segments."""

    def __init__(self, config: AllocatorConfig | None = None, validate_each_event: bool = False):
        self.config = config or AllocatorConfig()
        self.segments: dict[int, Segment] = {}
        self.reserved_bytes = 0
        self.allocated_bytes = 0
        self.events: list[AllocEvent] = []
        self.segments_created = 0
        self._next_segment = 0
        self._validate_each_event = validate_each_event

    def _log(self, op: str, nbytes: int, segment_id: int, offset: int) -> None:
        self.events.append(
            AllocEvent(
                len(self.events), op, nbytes, segment_id, offset,
                self.reserved_bytes, self.allocated_bytes,
            )
        )
        if self._validate_each_event:
            self.check_invariants()

    def alloc(self, nbytes: int) -> BlockHandle:
        """Best fit over cached free blocks; on miss, reserve a fresh segment of
        size round_up(nbytes, segment_granularity)."""
        if nbytes <= 0:
            raise UsageError(f"allocation size must be positive, got {nbytes}")
        best: tuple[int, int, int] | None = None  # (size, segment_id, block idx)
        for seg_id in sorted(self.segments):
            seg = self.segments[seg_id]
            for idx, blk in enumerate(seg.blocks):
                if blk.free and blk.size >= nbytes:
                    key = (blk.size, seg_id, idx)
                    if best is None or key < best:
                        best = key
        if best is None:
            seg = self._new_segment(nbytes)
            blk_idx = 0
        else:
            _, seg_id, blk_idx = best
            seg = self.segments[seg_id]
        blk = seg.blocks[blk_idx]
        if blk.size - nbytes >= self.config.split_threshold:
            remainder = Block(blk.offset + nbytes, blk.size - nbytes, True)
            blk.size = nbytes
            seg.blocks.insert(blk_idx + 1, remainder)
        blk.free = False
        self.allocated_bytes += blk.size
        self._log("alloc", nbytes, seg.id, blk.offset)
        return BlockHandle(seg.id, blk.offset, blk.size)

    def _new_segment(self, nbytes: int) -> Segment:
        size = _round_up(nbytes, self.config.segment_granularity)
        seg = Segment(self._next_segment, size, [Block(0, size, True)])
        self._next_segment += 1
        self.segments[seg.id] = seg
        self.reserved_bytes += size
        self.segments_created += 1
        self._log("new_segment", size, seg.id, 0)
        return seg

    def free(self, handle: BlockHandle) -> None:
        """Return a block to the segment cache; coalesce within the segment only."""
        seg = self.segments.get(handle.segment_id)
        if seg is None:
            raise UsageError(f"unknown segment {handle.segment_id}")
        idx = next(
            (i for i, b in enumerate(seg.blocks) if b.offset == handle.offset and not b.free),
            None,
        )
        if idx is None:
            raise UsageError(f"double free of block at segment {seg.id} offset {handle.offset}")
        blk = seg.blocks[idx]
        blk.free = True
        self.allocated_bytes -= blk.size
        freed_size, freed_offset = blk.size, blk.offset
        if idx + 1 < len(seg.blocks) and seg.blocks[idx + 1].free:
            blk.size += seg.blocks[idx + 1].size
            del seg.blocks[idx + 1]
        if idx > 0 and seg.blocks[idx - 1].free:
            seg.blocks[idx - 1].size += blk.size
            del seg.blocks[idx]
        self._log("free", freed_size, seg.id, freed_offset)

    def release_cache(self) -> None:
        """Drop fully-free segments; the only way reserved_bytes decreases."""
        for seg_id in sorted(self.segments):
            seg = self.segments[seg_id]
            if len(seg.blocks) == 1 and seg.blocks[0].free:
                self.reserved_bytes -= seg.size
                del self.segments[seg_id]
                self._log("release_cache", seg.size, seg_id, 0)

    def check_invariants(self) -> None:
        total_reserved = 0
        total_allocated = 0
        for seg in self.segments.values():
            covered = 0
            prev_free = False
            offset = 0
            for blk in seg.blocks:
                assert blk.offset == offset, "blocks must tile the segment"
                assert not (prev_free and blk.free), "adjacent free blocks must coalesce"
                offset += blk.size
                covered += blk.size
                prev_free = blk.free
                if not blk.free:
                    total_allocated += blk.size
            assert covered == seg.size, "block sizes must sum to the segment size"
            total_reserved += seg.size
        assert total_reserved == self.reserved_bytes
        assert total_allocated == self.allocated_bytes
        assert self.allocated_bytes <= self.reserved_bytes

    def dump_events_csv(self, f: IO[str]) -> None:
        writer = csv.writer(f)
        writer.writerow(["event_index", "op", "bytes", "segment_id", "offset", "reserved", "allocated"])
        for e in self.events:
            writer.writerow([e.index, e.op, e.bytes, e.segment_id, e.offset, e.reserved, e.allocated])


# --- myopic per-subgraph planning -----------------------------------------


@dataclass(frozen=True)
class StepInflation:
    step: int
    reserved_after: int
    theoretical_peak: int
    inflation_rate: float


@dataclass(frozen=True)
class InflationReport:
    reserved_peak: int
    theoretical_peak: int
    inflation_rate: float
    per_step: tuple[StepInflation, ...]
    segments_created: int

    def to_json_dict(self) -> dict:
        return {
            "reserved_peak": self.reserved_peak,
            "theoretical_peak": self.theoretical_peak,
            "inflation_rate": self.inflation_rate,
            "segments_created": self.segments_created,
            "per_step": [
                {
                    "step": s.step,
                    "reserved_after": s.reserved_after,
                    "theoretical_peak": s.theoretical_peak,
                    "inflation_rate": s.inflation_rate,
                }
                for s in self.per_step
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def default_breaks(g: ConcreteGraph) -> list[int]:
    """Graph-break positions: before each chunk loop's first op instance run,
    emulating per-subgraph capture around FFN loops and the logits block."""
    breaks: list[int] = []
    in_loop_prev = False
    for pos, op in enumerate(g.ops):
        in_loop = op.iteration is not None
        if in_loop != in_loop_prev:
            breaks.append(pos)
        in_loop_prev = in_loop
    return breaks


def no_breaks(g: ConcreteGraph) -> list[int]:
    return []


_POLICIES: dict[str, Callable[[ConcreteGraph], list[int]]] = {
    "default": default_breaks,
    "none": no_breaks,
}


def _subgraph_ranges(length: int, breaks: Sequence[int]) -> list[tuple[int, int]]:
    cuts = sorted({0, length, *[b for b in breaks if 0 < b < length]})
    return [(cuts[i], cuts[i + 1]) for i in range(len(cuts) - 1)]


def _run_step(
    allocator: CachingAllocator,
    table: LifetimeTable,
    ranges: Sequence[tuple[int, int]],
    alignment: int,
) -> None:
    """Rent one arena per subgraph plus individual blocks for crossing groups."""
    inside: dict[int, list[StorageGroup]] = {i: [] for i in range(len(ranges))}
    crossing: list[tuple[int, int, StorageGroup]] = []  # (def subgraph, last subgraph, group)

    def subgraph_of(pos: int) -> int:
        for i, (a, b) in enumerate(ranges):
            if a <= pos < b:
                return i
        return len(ranges) - 1

    for grp in table.groups:
        si = subgraph_of(grp.def_index)
        se = subgraph_of(grp.last_use_index)
        if si == se:
            inside[si].append(grp)
        else:
            crossing.append((si, se, grp))

    live_blocks: list[tuple[int, BlockHandle]] = []  # (release subgraph, handle)
    for i in range(len(ranges)):
        for si, se, grp in crossing:
            if si == i and grp.size > 0:
                live_blocks.append((se, allocator.alloc(grp.size)))
        local = inside[i]
        if local:
            sub_table = LifetimeTable(groups=tuple(local), length=table.length)
            ws = plan_first_fit(sub_table, alignment).workspace_size
            arena = allocator.alloc(ws) if ws > 0 else None
        else:
            arena = None
        if arena is not None:
            allocator.free(arena)
        done = [h for rel, h in live_blocks if rel == i]
        live_blocks = [(rel, h) for rel, h in live_blocks if rel != i]
        for h in done:
            allocator.free(h)
    for _, h in live_blocks:
        allocator.free(h)


def run_myopic(
    cfg: ModelConfig,
    scen: ScenarioConfig,
    break_policy: str | Callable[[ConcreteGraph], list[int]] = "default",
    allocator_config: AllocatorConfig | None = None,
    alignment: int = 256,
    allocator: CachingAllocator | None = None,
) -> InflationReport:
    """Drive the caching allocator with per-subgraph requests over a diffusion
    run and compare its reserved peak against the global single-request plan.

    Pass an allocator to keep its event log for inspection afterwards.
    """
    policy = _POLICIES[break_policy] if isinstance(break_policy, str) else break_policy
    template = build_layer_template(cfg)
    if allocator is None:
        allocator = CachingAllocator(allocator_config)
    per_step: list[StepInflation] = []
    theoretical = 0
    for n in range(scen.steps):
        masked = scen.masked_at(n)
        g = template.instantiate({"L": scen.length, "M": masked, "K_logits": 1, "K_FFN": 1})
        table = analyze(g)
        global_ws = plan_first_fit(table, alignment).workspace_size
        theoretical = max(theoretical, global_ws)
        ranges = _subgraph_ranges(len(g.ops), policy(g))
        _run_step(allocator, table, ranges, alignment)
        rate = allocator.reserved_bytes / global_ws - 1.0 if global_ws else 0.0
        per_step.append(StepInflation(n, allocator.reserved_bytes, global_ws, rate))
    reserved_peak = allocator.reserved_bytes  # caching: reserved never shrinks
    return InflationReport(
        reserved_peak=reserved_peak,
        theoretical_peak=theoretical,
        inflation_rate=reserved_peak / theoretical - 1.0 if theoretical else 0.0,
        per_step=tuple(per_step),
        segments_created=allocator.segments_created,
    )


def myopic_step_reserved(
    cfg: ModelConfig,
    length: int,
    masked: int,
    allocator_config: AllocatorConfig | None = None,
    alignment: int = 256,
) -> int:
    """Reserved bytes after one myopically planned step on a fresh allocator."""
    template = build_layer_template(cfg)
    g = template.instantiate({"L": length, "M": masked, "K_logits": 1, "K_FFN": 1})
    table = analyze(g)
    allocator = CachingAllocator(allocator_config)
    ranges = _subgraph_ranges(len(g.ops), default_breaks(g))
    _run_step(allocator, table, ranges, alignment)
    return allocator.reserved_bytes
