"""Contiguous virtual workspace with lazy physical commitment.

``reserve`` claims a large virtual range up front; ``commit_to`` binds physical
pages for a prefix of it, so the execution sees one contiguous buffer while
physical consumption stays within one page of the planned peak. Two backends
expose identical observable state: ``sim`` is pure accounting, ``os`` reserves
real address space (mmap PROT_NONE) and commits via mprotect.

A workspace is single-owner; concurrent commit/execute on one workspace is not
supported. Distinct workspaces are independent.
"""
from __future__ import annotations

import ctypes
import hashlib
import json
import mmap as _mmap
from dataclasses import dataclass, field

from .errors import CapacityError, ExecutionFault, ResourceError, ValidationError
from .graph import ConcreteGraph
from .liveness import analyze
from .planner import MemoryPlan

PROT_NONE = 0
PROT_READ = 1
PROT_WRITE = 2
MAP_PRIVATE = 0x02
MAP_ANONYMOUS = 0x20
MAP_NORESERVE = 0x4000

_libc = ctypes.CDLL(None, use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [
    ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int, ctypes.c_int, ctypes.c_int, ctypes.c_long,
]
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
_libc.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
_libc.madvise.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
_MADV_DONTNEED = 4
_MAP_FAILED = ctypes.c_void_p(-1).value


def _align_up(x: int, step: int) -> int:
    return -(-x // step) * step


class Workspace:
    """Reserved virtual range with a committed prefix. Use ``reserve()`` to create."""

    def __init__(self, reserved_bytes: int, page_size: int, backend: str):
        if page_size < 1 or (page_size & (page_size - 1)) != 0:
            raise ValueError(f"page_size must be a power of two, got {page_size}")
        if reserved_bytes <= 0:
            raise ValueError(f"reserved_bytes must be positive, got {reserved_bytes}")
        if backend not in ("sim", "os"):
            raise ValueError(f"unknown backend {backend!r}")
        if backend == "os" and page_size % _mmap.PAGESIZE != 0:
            raise ValueError(
                f"os backend needs page_size to be a multiple of the OS page "
                f"({_mmap.PAGESIZE}), got {page_size}"
            )
        self.page_size = page_size
        self.reserved_bytes = _align_up(reserved_bytes, page_size)
        self.committed_bytes = 0
        self.backend = backend
        self.base: int | None = None
        if backend == "os":
            addr = _libc.mmap(
                None, self.reserved_bytes, PROT_NONE,
                MAP_PRIVATE | MAP_ANONYMOUS | MAP_NORESERVE, -1, 0,
            )
            if addr is None or addr == _MAP_FAILED:
                err = ctypes.get_errno()
                raise ResourceError(f"mmap of {self.reserved_bytes} bytes failed (errno {err})")
            self.base = addr

    def commit_to(self, target_bytes: int) -> None:
        """Bind physical pages for [0, ceil(target/page)*page); shrinking decommits."""
        if target_bytes < 0:
            raise ValueError("commit target must be >= 0")
        if target_bytes > self.reserved_bytes:
            raise CapacityError(
                f"commit target {target_bytes} exceeds reservation {self.reserved_bytes}"
            )
        new = _align_up(target_bytes, self.page_size)
        if new == self.committed_bytes:
            return
        if self.backend == "os":
            assert self.base is not None
            if new > self.committed_bytes:
                grow = new - self.committed_bytes
                if _libc.mprotect(self.base + self.committed_bytes, grow, PROT_READ | PROT_WRITE):
                    raise ResourceError(f"mprotect commit failed (errno {ctypes.get_errno()})")
            else:
                shrink = self.committed_bytes - new
                if _libc.mprotect(self.base + new, shrink, PROT_NONE):
                    raise ResourceError(f"mprotect decommit failed (errno {ctypes.get_errno()})")
                _libc.madvise(self.base + new, shrink, _MADV_DONTNEED)
        self.committed_bytes = new

    # raw committed-prefix access, used by the plan executor
    def _write(self, offset: int, data: bytes) -> None:
        assert offset + len(data) <= self.committed_bytes
        if self.backend == "os":
            ctypes.memmove(self.base + offset, data, len(data))
        else:
            self._shadow()[offset : offset + len(data)] = data

    def _read(self, offset: int, length: int) -> bytes:
        assert offset + length <= self.committed_bytes
        if self.backend == "os":
            return ctypes.string_at(self.base + offset, length)
        return bytes(self._shadow()[offset : offset + length])

    def _shadow(self) -> bytearray:
        buf = getattr(self, "_sim_buf", None)
        if buf is None or len(buf) < self.reserved_bytes:
            buf = bytearray(self.reserved_bytes)
            self._sim_buf = buf
        return buf

    def close(self) -> None:
        if self.backend == "os" and self.base is not None:
            _libc.munmap(self.base, self.reserved_bytes)
            self.base = None

    def __enter__(self) -> "Workspace":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __del__(self) -> None:
        try:
            self.close()
        except Exception:
            pass


def reserve(reserved_bytes: int, page_size: int = 64 * 1024, backend: str = "sim") -> Workspace:
    """Reserve a contiguous virtual range; nothing is committed yet."""
    return Workspace(reserved_bytes, page_size, backend)


def commit_to(ws: Workspace, target_bytes: int) -> None:
    ws.commit_to(target_bytes)


@dataclass
class Fault:
    kind: str  # "out_of_range" | "clobber" | "read_before_define"
    op: str
    group: str
    partner: str | None = None
    detail: str = ""


@dataclass
class ExecutionReport:
    ops_executed: int
    faults: list[Fault] = field(default_factory=list)
    committed_bytes: int = 0
    workspace_size: int = 0

    @property
    def ok(self) -> bool:
        return not self.faults

    def to_json_dict(self) -> dict:
        return {
            "ops_executed": self.ops_executed,
            "faults": [
                {
                    "kind": f.kind, "op": f.op, "group": f.group,
                    "partner": f.partner, "detail": f.detail,
                }
                for f in self.faults
            ],
            "committed_bytes": self.committed_bytes,
            "workspace_size": self.workspace_size,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


def _group_tag_bytes(group_id: str) -> bytes:
    return hashlib.sha256(group_id.encode()).digest()[:8]


def _fill_pattern(group_id: str, size: int) -> bytes:
    tag = _group_tag_bytes(group_id)
    reps = size // 8 + 1
    return (tag * reps)[:size]


def execute_plan(
    ws: Workspace,
    plan: MemoryPlan,
    g: ConcreteGraph,
    raise_on_fault: bool = True,
) -> ExecutionReport:
    """Walk the op timeline touching each op's storage ranges.

    Defining a group fills its range with a per-group tag; reading verifies the
    whole range still carries the tag, so any overlap between simultaneously
    live groups is caught even when it misses the range start.
    """
    table = analyze(g)
    by_id = {e.group_id: e for e in plan.entries}
    missing = [grp.id for grp in table.groups if grp.id not in by_id]
    if missing:
        raise ValidationError(f"plan does not cover groups {missing}")
    if ws.committed_bytes < plan.workspace_size:
        raise CapacityError(
            f"workspace commits {ws.committed_bytes} bytes but the plan needs "
            f"{plan.workspace_size}"
        )

    group_of: dict = {}
    for grp in table.groups:
        for member in grp.members:
            group_of[member] = grp.id

    def overlap_partner(gid: str) -> str | None:
        e = by_id[gid]
        grp = next(grp for grp in table.groups if grp.id == gid)
        for other in table.groups:
            if other.id == gid or other.size == 0:
                continue
            oe = by_id[other.id]
            time = grp.def_index <= other.last_use_index and other.def_index <= grp.last_use_index
            addr = e.offset < oe.offset + other.size and oe.offset < e.offset + e.size
            if time and addr:
                return other.id
        return None

    report = ExecutionReport(
        ops_executed=0, committed_bytes=ws.committed_bytes, workspace_size=plan.workspace_size
    )
    defined: set[str] = set()

    def fault(kind: str, op: str, gid: str, partner: str | None, detail: str) -> None:
        f = Fault(kind, op, gid, partner, detail)
        report.faults.append(f)
        if raise_on_fault:
            groups = (gid, partner) if partner else (gid,)
            raise ExecutionFault(f"{kind} at op {op!r}: {detail}", op=op, groups=groups)

    for op in g.ops:
        for key in op.inputs:
            if g.is_graph_input(key):
                continue
            gid = group_of[key]
            e = by_id[gid]
            if e.size == 0:
                continue
            if gid not in defined:
                fault("read_before_define", op.label, gid, None, f"group {gid} read before any write")
                continue
            if e.offset + e.size > plan.workspace_size:
                fault(
                    "out_of_range", op.label, gid, None,
                    f"[{e.offset},{e.offset + e.size}) beyond workspace {plan.workspace_size}",
                )
                continue
            expect = _fill_pattern(gid, e.size)
            got = ws._read(e.offset, e.size)
            if got != expect:
                partner = overlap_partner(gid)
                fault(
                    "clobber", op.label, gid, partner,
                    f"group {gid} was overwritten while live"
                    + (f" (overlaps {partner})" if partner else ""),
                )
        for key in op.outputs:
            gid = group_of[key]
            e = by_id[gid]
            if e.size == 0:
                continue
            if e.offset < 0 or e.offset + e.size > plan.workspace_size:
                fault(
                    "out_of_range", op.label, gid, None,
                    f"[{e.offset},{e.offset + e.size}) beyond workspace {plan.workspace_size}",
                )
                continue
            ws._write(e.offset, _fill_pattern(gid, e.size))
            defined.add(gid)
        report.ops_executed += 1
    return report
