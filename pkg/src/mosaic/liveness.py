"""Storage lifetimes over the unrolled op timeline.

Timeline granularity is one position per op instance. A tensor is live from the
op that defines it through the op that last reads it, inclusive: an op needs
its inputs and outputs resident simultaneously. Tensors connected by in_place
or alias constraints share one storage group; graph inputs live outside the
workspace and are excluded.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import IO

from .errors import AnalysisError
from .graph import ConcreteGraph, InstKey

_TAG_ORDER = {"logits": 0, "ffn": 1, "attention": 2, "hidden": 3, "other": 4}


@dataclass(frozen=True, slots=True)
class StorageGroup:
    id: str
    size: int
    tag: str
    def_index: int
    last_use_index: int
    members: tuple[InstKey, ...]
    chunkable_symbol: str | None = None  # trip symbol if any member is a chunk-loop instance


@dataclass(frozen=True)
class LifetimeTable:
    groups: tuple[StorageGroup, ...]
    length: int


def _instance_label(key: InstKey) -> str:
    tid, it = key
    return tid if it is None else f"{tid}@{it}"


def analyze(g: ConcreteGraph) -> LifetimeTable:
    """Merge alias/in_place-connected instances and compute [def, last-use] spans."""
    defs: dict[InstKey, int] = {}
    uses: dict[InstKey, int] = {}
    order: list[InstKey] = []
    graph_inputs = g.graph_inputs

    for pos, op in enumerate(g.ops):
        for key in op.inputs:
            if key[0] in graph_inputs:
                continue
            if key not in defs:
                raise AnalysisError(
                    f"op {op.label!r} reads {_instance_label(key)!r} before it is defined"
                )
            uses[key] = pos
        for key in op.outputs:
            if key in defs:
                raise AnalysisError(f"{_instance_label(key)!r} defined twice")
            defs[key] = pos
            order.append(key)

    # union-find over instances; alias and in_place edges merge storage
    parent: dict[InstKey, InstKey] = {k: k for k in defs}

    def find(k: InstKey) -> InstKey:
        root = k
        while parent[root] != root:
            root = parent[root]
        while parent[k] != root:
            parent[k], k = root, parent[k]
        return root

    def union(a: InstKey, b: InstKey) -> None:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[rb] = ra

    edges: list[tuple[InstKey, InstKey]] = []
    for op in g.ops:
        for out_key, in_key in op.in_place:
            if in_key[0] in graph_inputs:
                continue
            edges.append((in_key, out_key))
    edges.extend(g.aliases)

    adj: dict[InstKey, list[InstKey]] = {}
    for a, b in edges:
        if a not in defs or b not in defs:
            raise AnalysisError(
                f"storage constraint references undefined instance "
                f"{_instance_label(a if a not in defs else b)!r}"
            )
        adj.setdefault(a, []).append(b)
        union(a, b)

    _reject_cycles(adj)

    members: dict[InstKey, list[InstKey]] = {}
    for key in order:
        members.setdefault(find(key), []).append(key)

    groups: list[StorageGroup] = []
    for root, keys in members.items():
        keys.sort(key=lambda k: (defs[k], k))
        def_index = defs[keys[0]]
        last = def_index
        size = 0
        tag_key = keys[0]
        for k in keys:
            last = max(last, uses.get(k, defs[k]), defs[k])
            if g.sizes[k] > size:
                size = g.sizes[k]
                tag_key = k
        chunk_sym = None
        for k in keys:
            chunk_sym = g.loop_symbol.get(k)
            if chunk_sym is not None:
                break
        groups.append(
            StorageGroup(
                id=_instance_label(keys[0]),
                size=size,
                tag=g.tag(tag_key[0]),
                def_index=def_index,
                last_use_index=last,
                members=tuple(keys),
                chunkable_symbol=chunk_sym,
            )
        )

    # barriers extend last use to at least the release position
    if g.barriers:
        by_member: dict[InstKey, int] = {}
        for keys, release in g.barriers:
            for k in keys:
                if k in defs:
                    by_member[k] = max(by_member.get(k, 0), release)
        if by_member:
            extended: list[StorageGroup] = []
            for grp in groups:
                release = max((by_member.get(k, 0) for k in grp.members), default=0)
                if release > grp.last_use_index:
                    grp = StorageGroup(
                        grp.id, grp.size, grp.tag, grp.def_index, release, grp.members,
                        grp.chunkable_symbol,
                    )
                extended.append(grp)
            groups = extended

    groups.sort(key=lambda grp: (grp.def_index, grp.last_use_index, grp.id))
    return LifetimeTable(groups=tuple(groups), length=len(g.ops))


def _reject_cycles(adj: dict[InstKey, list[InstKey]]) -> None:
    state: dict[InstKey, int] = {}  # 1 = in progress, 2 = done

    for start in adj:
        if state.get(start):
            continue
        stack: list[tuple[InstKey, int]] = [(start, 0)]
        state[start] = 1
        while stack:
            node, idx = stack[-1]
            succs = adj.get(node, ())
            if idx < len(succs):
                stack[-1] = (node, idx + 1)
                nxt = succs[idx]
                s = state.get(nxt)
                if s == 1:
                    raise AnalysisError(
                        f"alias/in_place cycle through {_instance_label(nxt)!r}"
                    )
                if s is None:
                    state[nxt] = 1
                    stack.append((nxt, 0))
            else:
                state[node] = 2
                stack.pop()


def live_profile(table: LifetimeTable) -> list[int]:
    """Bytes live at each timeline position (inclusive intervals)."""
    deltas = [0] * (table.length + 1)
    for grp in table.groups:
        deltas[grp.def_index] += grp.size
        deltas[grp.last_use_index + 1] -= grp.size
    profile: list[int] = []
    running = 0
    for t in range(table.length):
        running += deltas[t]
        profile.append(running)
    return profile


def max_live(table: LifetimeTable) -> int:
    """Lower bound on any workspace: peak of simultaneously live bytes."""
    if not table.groups:
        return 0
    return max(live_profile(table))


def component_profiles(table: LifetimeTable) -> dict[str, list[int]]:
    """Per-component-tag live-byte timelines."""
    deltas: dict[str, list[int]] = {}
    for grp in table.groups:
        d = deltas.get(grp.tag)
        if d is None:
            d = deltas[grp.tag] = [0] * (table.length + 1)
        d[grp.def_index] += grp.size
        d[grp.last_use_index + 1] -= grp.size
    profiles: dict[str, list[int]] = {}
    for tag, d in deltas.items():
        running = 0
        prof = []
        for t in range(table.length):
            running += d[t]
            prof.append(running)
        profiles[tag] = prof
    return profiles


def dominant_tags(table: LifetimeTable) -> list[str]:
    """Tag with the most live bytes at each position (logits > ffn > ... on ties)."""
    profiles = component_profiles(table)
    tags = sorted(profiles, key=lambda tag: _TAG_ORDER.get(tag, 9))
    out: list[str] = []
    for t in range(table.length):
        best_tag = "other"
        best = -1
        for tag in tags:
            v = profiles[tag][t]
            if v > best:
                best = v
                best_tag = tag
        out.append(best_tag)
    return out


def dump_csv(table: LifetimeTable, f: IO[str]) -> None:
    writer = csv.writer(f)
    writer.writerow(["group_id", "size_bytes", "def", "last_use", "tag"])
    for grp in table.groups:
        writer.writerow([grp.id, grp.size, grp.def_index, grp.last_use_index, grp.tag])
