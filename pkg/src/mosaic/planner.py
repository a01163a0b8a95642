"""Offset assignment for storage groups in one contiguous workspace.

``plan_first_fit`` is the production path: deterministic, linearithmic-ish, and
on chain-structured tables it hits the max-live lower bound exactly.
``plan_exact`` is a small-instance optimality oracle: branch and bound over
supported layouts (every group at offset 0 or resting on the aligned top of a
group below it), enumerated in non-decreasing offset order, seeded with the
first-fit solution as incumbent. Both are pure functions of their inputs.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Mapping

from .errors import TooLarge, ValidationError
from .liveness import LifetimeTable, StorageGroup, max_live


@dataclass(frozen=True)
class PlanEntry:
    group_id: str
    offset: int
    size: int
    def_index: int
    last_use_index: int
    tag: str


@dataclass(frozen=True)
class MemoryPlan:
    alignment: int
    workspace_size: int
    entries: tuple[PlanEntry, ...]

    def offsets(self) -> dict[str, int]:
        return {e.group_id: e.offset for e in self.entries}

    def to_json_dict(self) -> dict:
        return {
            "alignment": self.alignment,
            "workspace_size": self.workspace_size,
            "groups": [
                {
                    "id": e.group_id,
                    "offset": e.offset,
                    "size": e.size,
                    "def": e.def_index,
                    "last_use": e.last_use_index,
                    "tag": e.tag,
                }
                for e in self.entries
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


@dataclass(frozen=True)
class PlanStats:
    workspace_size: int
    lower_bound: int
    planning_time: float
    group_count: int


@dataclass(frozen=True)
class Violation:
    kind: str  # "overlap" | "alignment"
    group_a: str
    group_b: str | None
    detail: str


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def _check_alignment(alignment: int) -> None:
    if alignment < 1 or (alignment & (alignment - 1)) != 0:
        raise ValueError(f"alignment must be a power of two >= 1, got {alignment}")


def _align_up(x: int, alignment: int) -> int:
    return (x + alignment - 1) & ~(alignment - 1)


def _overlap_in_time(a: StorageGroup, b: StorageGroup) -> bool:
    return a.def_index <= b.last_use_index and b.def_index <= a.last_use_index


def _entries(table: LifetimeTable, offsets: Mapping[str, int], alignment: int) -> MemoryPlan:
    entries = tuple(
        PlanEntry(g.id, offsets[g.id], g.size, g.def_index, g.last_use_index, g.tag)
        for g in table.groups
    )
    workspace = max((e.offset + e.size for e in entries), default=0)
    return MemoryPlan(alignment=alignment, workspace_size=workspace, entries=entries)


def _first_fit_offsets(
    groups: tuple[StorageGroup, ...], alignment: int, key
) -> dict[str, int]:
    placed: list[tuple[int, int, int, int]] = []  # (def, last, offset, size)
    offsets: dict[str, int] = {}
    mask = alignment - 1
    for g in sorted(groups, key=key):
        size = g.size
        if size == 0:
            offsets[g.id] = 0
            continue
        lo, hi = g.def_index, g.last_use_index
        conflicts = [
            (o, s) for d, l, o, s in placed if d <= hi and lo <= l
        ]
        conflicts.sort()
        candidate = 0
        for off, other_size in conflicts:
            if candidate + size <= off:
                break
            top = (off + other_size + mask) & ~mask
            if top > candidate:
                candidate = top
        offsets[g.id] = candidate
        placed.append((lo, hi, candidate, size))
    return offsets


def plan_first_fit(table: LifetimeTable, alignment: int = 256) -> MemoryPlan:
    """Place each group at the lowest aligned offset free among lifetime-overlapping
    already-placed groups. Order: (def asc, size desc, id asc)."""
    _check_alignment(alignment)
    offsets = _first_fit_offsets(
        table.groups, alignment, lambda g: (g.def_index, -g.size, g.id)
    )
    return _entries(table, offsets, alignment)


class _Done(Exception):
    pass


def plan_exact(table: LifetimeTable, alignment: int = 256, limit: int = 12) -> MemoryPlan:
    """Minimum-workspace offset assignment for small instances.

    Complete over supported layouts: any feasible layout compacts (slide groups
    down) into one where each group sits at 0 or on the aligned top of a group
    below it, without increasing the peak; such layouts are enumerated by
    placing groups in non-decreasing offset order with candidate offsets drawn
    from already-placed tops. Prunes on the max-live lower bound and on the
    incumbent, so the result never exceeds first-fit.
    """
    _check_alignment(alignment)
    groups = table.groups
    if len(groups) > limit:
        raise TooLarge(f"{len(groups)} groups exceed the exact-planner limit of {limit}")

    lower = max_live(table)
    best_offsets = _first_fit_offsets(
        groups, alignment, lambda g: (g.def_index, -g.size, g.id)
    )
    best_ws = max((best_offsets[g.id] + g.size for g in groups), default=0)
    # alternative greedy orders sharpen the incumbent before the search starts
    for key in (
        lambda g: (-g.size, g.def_index, g.id),
        lambda g: (g.last_use_index, -g.size, g.id),
    ):
        offs = _first_fit_offsets(groups, alignment, key)
        ws = max((offs[g.id] + g.size for g in groups), default=0)
        if ws < best_ws:
            best_ws, best_offsets = ws, offs
    if best_ws <= lower:
        return _entries(table, best_offsets, alignment)

    active = sorted(
        (g for g in groups if g.size > 0), key=lambda g: (-g.size, g.def_index, g.id)
    )
    n = len(active)
    sizes = [g.size for g in active]
    defs = [g.def_index for g in active]
    lasts = [g.last_use_index for g in active]
    conflict = [
        [i != j and _overlap_in_time(active[i], active[j]) for j in range(n)] for i in range(n)
    ]

    offsets = [0] * n
    placed: list[int] = []
    placed_set: set[int] = set()

    # live bytes of the not-yet-placed groups per time step; everything not yet
    # placed must fit above last_offset, alongside the placed bytes already there
    horizon = table.length + 1
    rem_deltas = [0] * (horizon + 1)
    for i in range(n):
        rem_deltas[defs[i]] += sizes[i]
        rem_deltas[lasts[i] + 1] -= sizes[i]

    def node_bound(last_offset: int) -> int:
        peak = 0
        running = 0
        for t in range(horizon):
            running += rem_deltas[t]
            s = running
            for j in placed:
                if defs[j] <= t <= lasts[j]:
                    top = offsets[j] + sizes[j]
                    if top > last_offset:
                        s += top - max(last_offset, offsets[j])
            if s > peak:
                peak = s
        return last_offset + peak

    # canonical order among indistinguishable groups
    twin = [-1] * n
    seen: dict[tuple[int, int, int], int] = {}
    for i in range(n):
        key = (sizes[i], defs[i], lasts[i])
        if key in seen:
            twin[i] = seen[key]
        seen[key] = i

    def rec(remaining: int, last_offset: int, last_idx: int, peak: int) -> None:
        nonlocal best_ws, best_offsets
        if remaining == 0:
            best_ws = peak
            best_offsets = {g.id: 0 for g in groups if g.size == 0}
            best_offsets.update({active[i].id: offsets[i] for i in range(n)})
            if best_ws <= lower:
                raise _Done
            return
        if max(peak, node_bound(last_offset)) >= best_ws:
            return
        for i in range(n):
            if i in placed_set:
                continue
            if twin[i] >= 0 and twin[i] not in placed_set:
                continue
            # supported placements only: offset 0 or the aligned top of an
            # already-placed group this one conflicts with in time
            cands = {0}
            for j in placed:
                if conflict[i][j]:
                    cands.add(_align_up(offsets[j] + sizes[j], alignment))
            for off in sorted(cands):
                if off < last_offset or (off == last_offset and i <= last_idx):
                    continue
                new_peak = max(peak, off + sizes[i])
                if new_peak >= best_ws:
                    continue
                top = off + sizes[i]
                ok = True
                for j in placed:
                    if conflict[i][j] and offsets[j] < top and off < offsets[j] + sizes[j]:
                        ok = False
                        break
                if not ok:
                    continue
                offsets[i] = off
                placed.append(i)
                placed_set.add(i)
                rem_deltas[defs[i]] -= sizes[i]
                rem_deltas[lasts[i] + 1] += sizes[i]
                rec(remaining - 1, off, i, new_peak)
                rem_deltas[defs[i]] += sizes[i]
                rem_deltas[lasts[i] + 1] -= sizes[i]
                placed.pop()
                placed_set.discard(i)

    try:
        rec(n, 0, -1, 0)
    except _Done:
        pass
    return _entries(table, best_offsets, alignment)


def validate(plan: MemoryPlan, table: LifetimeTable) -> ValidationReport:
    """Report lifetime/address-overlap pairs and alignment violations; ok iff none."""
    by_id = {e.group_id: e for e in plan.entries}
    missing = [g.id for g in table.groups if g.id not in by_id]
    if missing:
        raise ValidationError(f"plan is missing groups {missing}")
    extra = set(by_id) - {g.id for g in table.groups}
    if extra:
        raise ValidationError(f"plan has unknown groups {sorted(extra)}")

    violations: list[Violation] = []
    groups = table.groups
    for g in groups:
        e = by_id[g.id]
        if e.offset % plan.alignment != 0:
            violations.append(
                Violation("alignment", g.id, None, f"offset {e.offset} % {plan.alignment} != 0")
            )
    for i in range(len(groups)):
        a = groups[i]
        ea = by_id[a.id]
        if a.size == 0:
            continue
        for j in range(i + 1, len(groups)):
            b = groups[j]
            if b.size == 0 or not _overlap_in_time(a, b):
                continue
            eb = by_id[b.id]
            if ea.offset < eb.offset + b.size and eb.offset < ea.offset + a.size:
                violations.append(
                    Violation(
                        "overlap",
                        a.id,
                        b.id,
                        f"[{ea.offset},{ea.offset + a.size}) vs [{eb.offset},{eb.offset + b.size}) "
                        f"with live spans [{a.def_index},{a.last_use_index}] and "
                        f"[{b.def_index},{b.last_use_index}]",
                    )
                )
    return ValidationReport(tuple(violations))
