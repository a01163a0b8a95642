"""Parameterized computation-graph templates and their concrete instantiations.

A template is built once per model with explicit primitives: ``add_tensor``,
``add_op``, ``add_alias``, ``add_barrier``, ``add_chunk_loop``. Input-dependent
dimensions stay symbolic and are bound at instantiation time, which also
logically unrolls chunk loops into per-iteration op instances.

Templates become immutable after ``freeze()``; frozen templates and the
ConcreteGraphs derived from them are safe to share across threads.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .dims import Dim, DimLike, as_dim, ceildiv, parse_dim, sym
from .errors import BuildError, InstantiationError

TAGS = ("hidden", "attention", "ffn", "logits", "other")

# A tensor instance: (tensor id, chunk-loop iteration or None).
InstKey = tuple[str, int | None]


@dataclass(frozen=True)
class TensorDecl:
    id: str
    shape: tuple[Dim, ...]
    element_size: int
    tag: str = "other"
    graph_input: bool = False

    def nbytes(self, bindings: Mapping[str, int]) -> int:
        n = self.element_size
        for d in self.shape:
            n *= d.eval(bindings)
        return n


@dataclass(frozen=True)
class OpDecl:
    id: str
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    kind: str = "op"
    # output id -> input id whose storage the output reuses
    in_place: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class AliasConstraint:
    producer: str
    consumer: str


@dataclass(frozen=True)
class Barrier:
    tensor_ids: tuple[str, ...]
    release_after_op: str


@dataclass(frozen=True)
class ChunkLoop:
    op_ids: tuple[str, ...]
    trip_symbol: str
    chunked_dims: tuple[str, ...] = ()


@dataclass(frozen=True, slots=True)
class OpInstance:
    op_id: str
    iteration: int | None
    kind: str
    inputs: tuple[InstKey, ...]
    outputs: tuple[InstKey, ...]
    in_place: tuple[tuple[InstKey, InstKey], ...]

    @property
    def label(self) -> str:
        if self.iteration is None:
            return self.op_id
        return f"{self.op_id}@{self.iteration}"


@dataclass
class ConcreteGraph:
    """A template with all symbols bound and chunk loops logically unrolled.

    Per-iteration chunk tensors share one TensorDecl; each iteration's instance
    is a distinct storage interval for liveness purposes.
    """

    template: "GraphTemplate"
    bindings: dict[str, int]
    ops: tuple[OpInstance, ...]
    sizes: dict[InstKey, int]
    aliases: tuple[tuple[InstKey, InstKey], ...]
    barriers: tuple[tuple[tuple[InstKey, ...], int], ...]
    graph_inputs: frozenset[str]
    # instance -> trip symbol of the loop that produced it (loop instances only)
    loop_symbol: dict[InstKey, str] = field(default_factory=dict)

    def tag(self, tensor_id: str) -> str:
        return self.template.tensor(tensor_id).tag

    def is_graph_input(self, key: InstKey) -> bool:
        return key[0] in self.graph_inputs

    @property
    def op_count(self) -> int:
        return len(self.ops)


class GraphTemplate:
    """Mutable builder for a symbolic op/tensor DAG; immutable once frozen."""

    def __init__(self, symbols: Iterable[str]):
        names = tuple(symbols)
        if len(set(names)) != len(names):
            raise BuildError(f"duplicate symbol in {names}")
        self.symbols: tuple[str, ...] = names
        self.tensors: dict[str, TensorDecl] = {}
        self.ops: list[OpDecl] = []
        self.aliases: list[AliasConstraint] = []
        self.barriers: list[Barrier] = []
        self.chunk_loops: list[ChunkLoop] = []
        self._frozen = False
        self._producer: dict[str, int] = {}  # tensor id -> producing op position
        self._op_pos: dict[str, int] = {}
        # caches filled by freeze()
        self._loop_ranges: list[tuple[int, int, ChunkLoop]] = []
        self._loop_of_op: dict[str, int] = {}
        self._inst_shape: dict[str, tuple[Dim, ...]] = {}
        # per-op instance-key recipes: (tid, producing loop index or None)
        self._op_key_plans: list[tuple[tuple[tuple[str, int | None], ...], ...]] = []

    # --- builder primitives ---------------------------------------------

    def _check_mutable(self) -> None:
        if self._frozen:
            raise BuildError("template is frozen")

    def add_tensor(
        self,
        tensor_id: str,
        shape: Iterable[DimLike],
        element_size: int,
        tag: str = "other",
        graph_input: bool = False,
    ) -> str:
        self._check_mutable()
        if tensor_id in self.tensors:
            raise BuildError(f"duplicate tensor id {tensor_id!r}")
        if tag not in TAGS:
            raise BuildError(f"unknown component tag {tag!r}, expected one of {TAGS}")
        if not isinstance(element_size, int) or element_size < 1:
            raise BuildError(f"element_size must be a positive int, got {element_size!r}")
        dims = tuple(as_dim(d) for d in shape)
        unknown = frozenset().union(*(d.symbols() for d in dims)) - set(self.symbols) if dims else frozenset()
        if unknown:
            raise BuildError(f"tensor {tensor_id!r} uses undeclared symbols {sorted(unknown)}")
        self.tensors[tensor_id] = TensorDecl(tensor_id, dims, element_size, tag, graph_input)
        return tensor_id

    def add_op(
        self,
        op_id: str,
        inputs: Iterable[str],
        outputs: Iterable[str],
        kind: str = "op",
        in_place: Mapping[str, str] | None = None,
    ) -> str:
        self._check_mutable()
        if op_id in self._op_pos:
            raise BuildError(f"duplicate op id {op_id!r}")
        ins = tuple(inputs)
        outs = tuple(outputs)
        for t in ins:
            decl = self.tensors.get(t)
            if decl is None:
                raise BuildError(f"op {op_id!r} consumes undeclared tensor {t!r}")
            if not decl.graph_input and t not in self._producer:
                raise BuildError(
                    f"op {op_id!r} consumes tensor {t!r} that is neither a graph input "
                    "nor produced by an earlier op"
                )
        for t in outs:
            decl = self.tensors.get(t)
            if decl is None:
                raise BuildError(f"op {op_id!r} produces undeclared tensor {t!r}")
            if decl.graph_input:
                raise BuildError(f"op {op_id!r} cannot produce graph input {t!r}")
            if t in self._producer:
                raise BuildError(f"tensor {t!r} already produced by an earlier op")
        ip = tuple(sorted((in_place or {}).items()))
        for out, src in ip:
            if out not in outs:
                raise BuildError(f"in_place key {out!r} is not an output of op {op_id!r}")
            if src not in ins:
                raise BuildError(f"in_place source {src!r} is not an input of op {op_id!r}")
            if self.tensors[src].graph_input:
                raise BuildError(f"in_place cannot reuse graph input {src!r}")
        pos = len(self.ops)
        self.ops.append(OpDecl(op_id, ins, outs, kind, ip))
        self._op_pos[op_id] = pos
        for t in outs:
            self._producer[t] = pos
        return op_id

    def add_alias(self, producer: str, consumer: str) -> None:
        self._check_mutable()
        for t in (producer, consumer):
            if t not in self.tensors:
                raise BuildError(f"alias references undeclared tensor {t!r}")
            if self.tensors[t].graph_input:
                raise BuildError(f"alias cannot involve graph input {t!r}")
        if producer == consumer:
            raise BuildError(f"alias of {producer!r} with itself")
        self.aliases.append(AliasConstraint(producer, consumer))

    def add_barrier(self, tensor_ids: Iterable[str], release_after_op: str) -> None:
        self._check_mutable()
        ids = tuple(tensor_ids)
        for t in ids:
            if t not in self.tensors:
                raise BuildError(f"barrier references undeclared tensor {t!r}")
        if release_after_op not in self._op_pos:
            raise BuildError(f"barrier references unknown op {release_after_op!r}")
        self.barriers.append(Barrier(ids, release_after_op))

    def add_chunk_loop(
        self,
        op_ids: Iterable[str],
        trip_symbol: str,
        chunked_dims: Iterable[str] = (),
    ) -> None:
        self._check_mutable()
        ids = tuple(op_ids)
        if not ids:
            raise BuildError("chunk loop needs at least one op")
        for op_id in ids:
            if op_id not in self._op_pos:
                raise BuildError(f"chunk loop references unknown op {op_id!r}")
        positions = sorted(self._op_pos[o] for o in ids)
        if positions != list(range(positions[0], positions[-1] + 1)):
            raise BuildError(f"chunk loop ops {ids} are not a contiguous op range")
        if trip_symbol not in self.symbols:
            raise BuildError(f"unknown trip-count symbol {trip_symbol!r}")
        dims = tuple(chunked_dims)
        unknown = set(dims) - set(self.symbols)
        if unknown:
            raise BuildError(f"chunk loop chunks undeclared symbols {sorted(unknown)}")
        for lo, hi, _ in self._pending_loop_ranges():
            if positions[0] <= hi and lo <= positions[-1]:
                raise BuildError("chunk loops cannot overlap or nest")
        # normalize to template order
        ordered = tuple(sorted(ids, key=self._op_pos.__getitem__))
        self.chunk_loops.append(ChunkLoop(ordered, trip_symbol, dims))

    def _pending_loop_ranges(self) -> list[tuple[int, int, ChunkLoop]]:
        out = []
        for loop in self.chunk_loops:
            pos = [self._op_pos[o] for o in loop.op_ids]
            out.append((min(pos), max(pos), loop))
        return out

    # --- freezing and instantiation ---------------------------------------

    def freeze(self) -> "GraphTemplate":
        if self._frozen:
            return self
        for alias in self.aliases:
            for t in (alias.producer, alias.consumer):
                if t not in self._producer:
                    raise BuildError(f"alias endpoint {t!r} is never produced")
        self._loop_ranges = sorted(self._pending_loop_ranges())
        self._loop_of_op = {}
        for idx, (lo, hi, loop) in enumerate(self._loop_ranges):
            for op_id in loop.op_ids:
                self._loop_of_op[op_id] = idx
        # precompute instantiation shapes: tensors produced inside a loop get
        # their chunked symbols divided (ceil) by the loop's trip count
        self._inst_shape = {}
        for tid, decl in self.tensors.items():
            shape = decl.shape
            pos = self._producer.get(tid)
            if pos is not None:
                loop_idx = self._loop_of_op.get(self.ops[pos].id)
                if loop_idx is not None:
                    loop = self._loop_ranges[loop_idx][2]
                    if loop.chunked_dims:
                        mapping = {
                            s: ceildiv(sym(s), sym(loop.trip_symbol)) for s in loop.chunked_dims
                        }
                        shape = tuple(d.subst(mapping) for d in shape)
            self._inst_shape[tid] = shape

        def producing_loop(tid: str) -> int | None:
            pos = self._producer.get(tid)
            if pos is None:
                return None
            return self._loop_of_op.get(self.ops[pos].id)

        self._op_key_plans = [
            (
                tuple((tid, producing_loop(tid)) for tid in op.inputs),
                tuple((tid, producing_loop(tid)) for tid in op.outputs),
                tuple(
                    ((o, producing_loop(o)), (s, producing_loop(s))) for o, s in op.in_place
                ),
            )
            for op in self.ops
        ]
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def tensor(self, tensor_id: str) -> TensorDecl:
        return self.tensors[tensor_id]

    def _loop_index_of(self, op_id: str) -> int | None:
        return self._loop_of_op.get(op_id)

    def instantiate(self, bindings: Mapping[str, int]) -> ConcreteGraph:
        self.freeze()
        bound = dict(bindings)
        missing = [s for s in self.symbols if s not in bound]
        if missing:
            raise InstantiationError(f"missing bindings for symbols {missing}")
        for s in self.symbols:
            v = bound[s]
            if not isinstance(v, int) or v < 0:
                raise InstantiationError(f"binding {s}={v!r} is not a non-negative integer")
        for _, _, loop in self._loop_ranges:
            if bound[loop.trip_symbol] < 1:
                raise InstantiationError(
                    f"trip count {loop.trip_symbol}={bound[loop.trip_symbol]} must be >= 1"
                )

        inst_bytes = {
            tid: self.tensors[tid].element_size * _prod_eval(self._inst_shape[tid], bound)
            for tid in self.tensors
        }

        ops_out: list[OpInstance] = []
        sizes: dict[InstKey, int] = {}
        loop_symbol: dict[InstKey, str] = {}
        last_pos_of_op: dict[str, int] = {}
        # consumers outside a producing loop see its final iteration's chunk
        final_it = [bound[loop.trip_symbol] - 1 for _, _, loop in self._loop_ranges]

        # pre-size every instance; loop-produced tensors get one per iteration
        for tid in self.tensors:
            pos = self._producer.get(tid)
            loop_idx = None if pos is None else self._loop_of_op.get(self.ops[pos].id)
            if loop_idx is None:
                sizes[(tid, None)] = inst_bytes[tid]
            else:
                loop = self._loop_ranges[loop_idx][2]
                nbytes = inst_bytes[tid]
                for it in range(bound[loop.trip_symbol]):
                    key = (tid, it)
                    sizes[key] = nbytes
                    loop_symbol[key] = loop.trip_symbol

        def resolve(tid: str, pl: int | None, lid: int | None) -> InstKey | None:
            if pl is None:
                return (tid, None)
            if pl == lid:
                return None  # varies per iteration
            return (tid, final_it[pl])

        # per-op recipes with only the same-loop keys left unresolved
        recipes = []
        for pos, op in enumerate(self.ops):
            lid = self._loop_of_op.get(op.id)
            in_plan, out_plan, ip_plan = self._op_key_plans[pos]
            ins = tuple((resolve(t, pl, lid), t) for t, pl in in_plan)
            outs = tuple((resolve(t, pl, lid), t) for t, pl in out_plan)
            ip = tuple(
                ((resolve(o, opl, lid), o), (resolve(s, spl, lid), s))
                for (o, opl), (s, spl) in ip_plan
            )
            if lid is None:
                static = OpInstance(
                    op.id, None, op.kind,
                    tuple(k for k, _ in ins), tuple(k for k, _ in outs),
                    tuple((ok, sk) for (ok, _), (sk, _) in ip),
                )
                recipes.append(static)
            else:
                recipes.append((op, ins, outs, ip))

        def emit_loop(pos: int, iteration: int) -> None:
            op, ins, outs, ip = recipes[pos]
            inst = OpInstance(
                op.id, iteration, op.kind,
                tuple(k if k is not None else (t, iteration) for k, t in ins),
                tuple(k if k is not None else (t, iteration) for k, t in outs),
                tuple(
                    (
                        ok if ok is not None else (ot, iteration),
                        sk if sk is not None else (st, iteration),
                    )
                    for (ok, ot), (sk, st) in ip
                ),
            )
            ops_out.append(inst)
            last_pos_of_op[op.id] = len(ops_out) - 1

        i = 0
        loop_starts = {lo: (lo, hi, idx) for idx, (lo, hi, _) in enumerate(self._loop_ranges)}
        while i < len(self.ops):
            if i in loop_starts:
                lo, hi, loop_idx = loop_starts[i]
                loop = self._loop_ranges[loop_idx][2]
                for it in range(bound[loop.trip_symbol]):
                    for j in range(lo, hi + 1):
                        emit_loop(j, it)
                i = hi + 1
            else:
                ops_out.append(recipes[i])
                last_pos_of_op[self.ops[i].id] = len(ops_out) - 1
                i += 1

        # verify storage-sharing size constraints under this binding
        for op in ops_out:
            for out_key, in_key in op.in_place:
                if sizes[out_key] != sizes[in_key]:
                    raise InstantiationError(
                        f"in_place pair {out_key[0]!r}<-{in_key[0]!r} has mismatched sizes "
                        f"{sizes[out_key]} != {sizes[in_key]} under {bound}"
                    )

        alias_pairs: list[tuple[InstKey, InstKey]] = []
        for alias in self.aliases:
            p_loop = self._loop_of_op.get(self.ops[self._producer[alias.producer]].id)
            c_loop = self._loop_of_op.get(self.ops[self._producer[alias.consumer]].id)

            def keys_of(tid: str, loop_idx: int | None) -> list[InstKey]:
                if loop_idx is None:
                    return [(tid, None)]
                trip = bound[self._loop_ranges[loop_idx][2].trip_symbol]
                return [(tid, it) for it in range(trip)]

            p_keys = keys_of(alias.producer, p_loop)
            c_keys = keys_of(alias.consumer, c_loop)
            if p_loop is not None and p_loop == c_loop:
                pairs = list(zip(p_keys, c_keys))
            else:
                pairs = [(pk, ck) for pk in p_keys for ck in c_keys]
            for pk, ck in pairs:
                if sizes.get(pk, inst_bytes[pk[0]]) != sizes.get(ck, inst_bytes[ck[0]]):
                    raise InstantiationError(
                        f"alias {pk[0]!r}~{ck[0]!r} has mismatched sizes under {bound}"
                    )
                sizes.setdefault(pk, inst_bytes[pk[0]])
                sizes.setdefault(ck, inst_bytes[ck[0]])
                alias_pairs.append((pk, ck))

        barriers_out: list[tuple[tuple[InstKey, ...], int]] = []
        for barrier in self.barriers:
            release = last_pos_of_op.get(barrier.release_after_op)
            if release is None:
                continue
            members: list[InstKey] = []
            for tid in barrier.tensor_ids:
                pos = self._producer.get(tid)
                loop_idx = None if pos is None else self._loop_of_op.get(self.ops[pos].id)
                if loop_idx is None:
                    members.append((tid, None))
                else:
                    trip = bound[self._loop_ranges[loop_idx][2].trip_symbol]
                    members.extend((tid, it) for it in range(trip))
            barriers_out.append((tuple(members), release))

        graph_inputs = frozenset(t for t, d in self.tensors.items() if d.graph_input)
        return ConcreteGraph(
            template=self,
            bindings=bound,
            ops=tuple(ops_out),
            sizes=sizes,
            aliases=tuple(alias_pairs),
            barriers=tuple(barriers_out),
            graph_inputs=graph_inputs,
            loop_symbol=loop_symbol,
        )

    # --- serialization -----------------------------------------------------

    def to_json_dict(self) -> dict:
        return {
            "symbols": list(self.symbols),
            "tensors": [
                {
                    "id": d.id,
                    "shape": [str(s) for s in d.shape],
                    "element_size": d.element_size,
                    "tag": d.tag,
                    "graph_input": d.graph_input,
                }
                for d in self.tensors.values()
            ],
            "ops": [
                {
                    "id": o.id,
                    "inputs": list(o.inputs),
                    "outputs": list(o.outputs),
                    "kind": o.kind,
                    "in_place": dict(o.in_place),
                }
                for o in self.ops
            ],
            "aliases": [{"producer": a.producer, "consumer": a.consumer} for a in self.aliases],
            "barriers": [
                {"tensors": list(b.tensor_ids), "release_after_op": b.release_after_op}
                for b in self.barriers
            ],
            "chunk_loops": [
                {
                    "ops": list(c.op_ids),
                    "trip_symbol": c.trip_symbol,
                    "chunked_dims": list(c.chunked_dims),
                }
                for c in self.chunk_loops
            ],
        }

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(self.to_json_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def new_template(symbols: Iterable[str]) -> GraphTemplate:
    return GraphTemplate(symbols)


def template_from_json_dict(data: Mapping) -> GraphTemplate:
    t = GraphTemplate(data.get("symbols", ()))
    for td in data.get("tensors", ()):
        t.add_tensor(
            td["id"],
            [parse_dim(s) for s in td["shape"]],
            td["element_size"],
            td.get("tag", "other"),
            td.get("graph_input", False),
        )
    for od in data.get("ops", ()):
        t.add_op(
            od["id"],
            od.get("inputs", ()),
            od.get("outputs", ()),
            od.get("kind", "op"),
            od.get("in_place") or None,
        )
    for ad in data.get("aliases", ()):
        t.add_alias(ad["producer"], ad["consumer"])
    for bd in data.get("barriers", ()):
        t.add_barrier(bd["tensors"], bd["release_after_op"])
    for cd in data.get("chunk_loops", ()):
        t.add_chunk_loop(cd["ops"], cd["trip_symbol"], cd.get("chunked_dims", ()))
    return t


def load_template(path: str) -> GraphTemplate:
    with open(path) as f:
        return template_from_json_dict(json.load(f))


def _prod_eval(shape: tuple[Dim, ...], bindings: Mapping[str, int]) -> int:
    n = 1
    for d in shape:
        n *= d.eval(bindings)
    return n
