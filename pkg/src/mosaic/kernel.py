"""Reference mask-only gather-GEMM.

Computes logits rows only for masked tokens, reading scattered hidden-state
rows tile by tile through indirect row indexing; no [m x d] gathered copy is
ever materialized. Accumulation is strictly k-major in ascending global k, one
rank-1 update per k, so the output is bit-identical across tile configurations
and each output tile is independently computable (a worker per output tile
preserves determinism).

Scratch accounting covers the persistent on-tile panels (gathered rows, weight
tile, accumulator); transient per-update expression temporaries are the CPU
stand-in for register traffic and are not charged.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class GatherGemmProblem:
    hidden: np.ndarray  # [n_tokens, d]
    weight: np.ndarray  # [d, vocab]
    mask_idx: tuple[int, ...]
    tile_m: int = 32
    tile_d: int = 32
    tile_v: int = 32

    def __post_init__(self) -> None:
        if self.hidden.ndim != 2 or self.weight.ndim != 2:
            raise InputError("hidden and weight must be 2-D matrices")
        if self.hidden.shape[1] != self.weight.shape[0]:
            raise InputError(
                f"inner dims differ: hidden is {self.hidden.shape}, weight is {self.weight.shape}"
            )
        if min(self.tile_m, self.tile_d, self.tile_v) < 1:
            raise InputError("tile sizes must be >= 1")
        n = self.hidden.shape[0]
        seen: set[int] = set()
        for idx in self.mask_idx:
            if not 0 <= idx < n:
                raise InputError(f"mask index {idx} out of range [0, {n})")
            if idx in seen:
                raise InputError(f"duplicate mask index {idx}")
            seen.add(idx)


@dataclass(frozen=True)
class ScratchAccount:
    peak_elements: int
    bound: int  # tile_m*tile_d + tile_d*tile_v + tile_m*tile_v

    @property
    def within_bound(self) -> bool:
        return self.peak_elements <= self.bound


def gather_gemm(p: GatherGemmProblem) -> tuple[np.ndarray, ScratchAccount]:
    """logits[i, :] = hidden[mask_idx[i], :] @ weight, tiled with indirect rows."""
    H, W = p.hidden, p.weight
    idx = np.asarray(p.mask_idx, dtype=np.intp)
    m = idx.shape[0]
    d, vocab = W.shape
    out = np.zeros((m, vocab), dtype=H.dtype)
    peak = 0
    for i0 in range(0, m, p.tile_m):
        rows = idx[i0 : i0 + p.tile_m]
        for j0 in range(0, vocab, p.tile_v):
            j1 = min(j0 + p.tile_v, vocab)
            acc = np.zeros((rows.shape[0], j1 - j0), dtype=H.dtype)
            for k0 in range(0, d, p.tile_d):
                k1 = min(k0 + p.tile_d, d)
                a = H[rows, k0:k1]  # indirect gather of one tile panel
                b = W[k0:k1, j0:j1]
                used = a.size + b.size + acc.size
                if used > peak:
                    peak = used
                for k in range(k1 - k0):  # ascending k: deterministic accumulation
                    acc += a[:, k, None] * b[None, k, :]
            out[i0 : i0 + rows.shape[0], j0:j1] = acc
    bound = p.tile_m * p.tile_d + p.tile_d * p.tile_v + p.tile_m * p.tile_v
    return out, ScratchAccount(peak_elements=peak, bound=bound)


def gemm_reference(h_rows: Sequence[Sequence[float]] | np.ndarray, w: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    """Naive exact triple-loop product, the independent oracle for gather_gemm."""
    a = np.asarray(h_rows, dtype=np.float64)
    b = np.asarray(w, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise InputError(f"dimension mismatch: {a.shape} @ {b.shape}")
    m, d = a.shape
    _, vocab = b.shape
    out = np.zeros((m, vocab), dtype=np.float64)
    for i in range(m):
        for j in range(vocab):
            s = 0.0
            for k in range(d):
                s += float(a[i, k]) * float(b[k, j])
            out[i, j] = s
    return out


def dense_then_discard(hidden: np.ndarray, weight: np.ndarray, mask_idx: Sequence[int]) -> np.ndarray:
    """Eager baseline: full logits for every token, then keep the masked rows."""
    full = hidden @ weight
    return full[np.asarray(mask_idx, dtype=np.intp), :]
