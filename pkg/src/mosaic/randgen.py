"""Seeded random instances for property checks: op DAGs with aliases, barriers,
in-place pairs, one optional chunk loop, and standalone lifetime tables."""
from __future__ import annotations

import random

from .dims import const
from .graph import ConcreteGraph, new_template
from .liveness import LifetimeTable, StorageGroup

_TAGS = ("hidden", "attention", "ffn", "logits", "other")


def random_concrete_graph(rng: random.Random, max_ops: int = 20) -> ConcreteGraph:
    n_ops = rng.randint(1, max_ops)
    with_loop = rng.random() < 0.5 and n_ops >= 3
    t = new_template(("K",) if with_loop else ())

    produced: list[str] = []
    op_ids: list[str] = []
    tensor_n = 0

    def add_tensor(shape=None, element_size=None, graph_input=False) -> str:
        nonlocal tensor_n
        tid = f"t{tensor_n}"
        tensor_n += 1
        if shape is None:
            shape = [const(rng.randint(1, 64)) for _ in range(rng.randint(1, 2))]
            element_size = rng.choice((1, 2, 4, 8))
        t.add_tensor(tid, shape, element_size, rng.choice(_TAGS), graph_input)
        return tid

    def clone_shape_of(src: str, graph_input: bool = False) -> str:
        decl = t.tensor(src)
        return add_tensor(decl.shape, decl.element_size, graph_input)

    inputs_pool = [add_tensor(graph_input=True) for _ in range(rng.randint(1, 3))]

    for i in range(n_ops):
        avail = produced + inputs_pool
        n_in = rng.randint(0, min(3, len(avail)))
        ins = rng.sample(avail, n_in) if n_in else []
        outs: list[str] = []
        in_place: dict[str, str] = {}
        reusable = [x for x in ins if x in produced]
        if reusable and rng.random() < 0.35:
            src = rng.choice(reusable)
            out = clone_shape_of(src)
            outs.append(out)
            in_place[out] = src
        n_out = rng.randint(1, 2)
        while len(outs) < n_out:
            if produced and rng.random() < 0.4:
                outs.append(clone_shape_of(rng.choice(produced)))
            else:
                outs.append(add_tensor())
        op_id = f"op{i}"
        t.add_op(
            op_id, ins, outs,
            kind=rng.choice(("matmul", "add", "norm", "misc")),
            in_place=in_place or None,
        )
        op_ids.append(op_id)
        produced.extend(outs)

    # aliases between equal-size produced tensors; avoid closing storage cycles
    edges: dict[str, set[str]] = {}
    for op in t.ops:
        for out, src in op.in_place:
            edges.setdefault(src, set()).add(out)

    def reaches(a: str, b: str) -> bool:
        stack, seen = [a], set()
        while stack:
            x = stack.pop()
            if x == b:
                return True
            if x in seen:
                continue
            seen.add(x)
            stack.extend(edges.get(x, ()))
        return False

    by_key: dict[tuple, list[str]] = {}
    for tid in produced:
        decl = t.tensor(tid)
        by_key.setdefault((decl.shape, decl.element_size), []).append(tid)
    for group in by_key.values():
        if len(group) >= 2 and rng.random() < 0.5:
            a, b = rng.sample(group, 2)
            if not reaches(b, a):
                t.add_alias(a, b)
                edges.setdefault(a, set()).add(b)

    # barriers extending arbitrary tensors to later ops
    for _ in range(rng.randint(0, 2)):
        t.add_barrier([rng.choice(produced)], rng.choice(op_ids))

    bindings: dict[str, int] = {}
    if with_loop:
        start = rng.randrange(0, n_ops - 1)
        length = rng.randint(1, min(3, n_ops - start))
        loop_ops = op_ids[start : start + length]
        body_outs: set[str] = set()
        for oid in loop_ops:
            body_outs.update(t.ops[t._op_pos[oid]].outputs)
        outside_inputs: set[str] = set()
        for oid in loop_ops:
            for tid in t.ops[t._op_pos[oid]].inputs:
                if tid not in body_outs and not t.tensor(tid).graph_input:
                    outside_inputs.add(tid)
        t.add_chunk_loop(loop_ops, "K")
        for tid in sorted(outside_inputs):
            t.add_barrier([tid], loop_ops[-1])
        bindings["K"] = rng.randint(1, 3)

    return t.instantiate(bindings)


def random_lifetime_table(
    rng: random.Random, max_groups: int = 64, max_size: int = 4096
) -> LifetimeTable:
    n = rng.randint(1, max_groups)
    length = max(2, 2 * n)
    groups = []
    for i in range(n):
        a = rng.randrange(0, length)
        b = rng.randrange(a, length)
        size = rng.choice((rng.randint(1, max_size), rng.randint(1, 16) * 256))
        groups.append(
            StorageGroup(
                id=f"g{i}",
                size=size,
                tag=rng.choice(_TAGS),
                def_index=a,
                last_use_index=b,
                members=((f"g{i}", None),),
            )
        )
    groups.sort(key=lambda g: (g.def_index, g.last_use_index, g.id))
    return LifetimeTable(groups=tuple(groups), length=length)
