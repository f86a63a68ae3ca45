"""Sparse voxel geometry: per-level cell sets and convolution rulebooks.

A rulebook lists (input row, output row) pairs grouped by kernel offset, in
CSR form (``ptr[k]:ptr[k+1]`` are the pairs for offset ``k``). Within one
offset every output row and every input row appears at most once.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import List

import numpy as np

from ..voxel import decode_keys, encode_keys

OFFSETS = np.array(list(product((-1, 0, 1), repeat=3)), dtype=np.int64)
N_OFFSETS = len(OFFSETS)


@dataclass(frozen=True, eq=False)
class Rulebook:
    rb_in: np.ndarray
    rb_out: np.ndarray
    ptr: np.ndarray
    n_in: int
    n_out: int

    def transpose(self) -> "Rulebook":
        return Rulebook(self.rb_out, self.rb_in, self.ptr, self.n_out, self.n_in)

    @property
    def n_pairs(self) -> int:
        return int(self.ptr[-1])

    @staticmethod
    def from_pairs(k, rb_in, rb_out, n_in, n_out) -> "Rulebook":
        order = np.argsort(k, kind="stable")
        ptr = np.zeros(N_OFFSETS + 1, dtype=np.int64)
        np.cumsum(np.bincount(k, minlength=N_OFFSETS), out=ptr[1:])
        return Rulebook(
            np.ascontiguousarray(rb_in[order], dtype=np.int64),
            np.ascontiguousarray(rb_out[order], dtype=np.int64),
            ptr,
            int(n_in),
            int(n_out),
        )

    @staticmethod
    def concat(books: List["Rulebook"]) -> "Rulebook":
        """Block-diagonal union: rows of book ``i`` are shifted past books ``< i``."""
        ks, ins, outs = [], [], []
        in_off = out_off = 0
        for b in books:
            k = np.repeat(np.arange(N_OFFSETS), np.diff(b.ptr))
            ks.append(k)
            ins.append(b.rb_in + in_off)
            outs.append(b.rb_out + out_off)
            in_off += b.n_in
            out_off += b.n_out
        if not books:
            return Rulebook.from_pairs(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64), 0, 0)
        return Rulebook.from_pairs(np.concatenate(ks), np.concatenate(ins), np.concatenate(outs), in_off, out_off)


_DENSE_LIMIT = 1 << 24  # cells; larger bounding boxes fall back to binary search


def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    if sorted_keys.shape[0] == 0:
        return np.full(query.shape, -1, dtype=np.int64)
    pos = np.minimum(np.searchsorted(sorted_keys, query), sorted_keys.shape[0] - 1)
    return np.where(sorted_keys[pos] == query, pos, -1)


class _CellIndex:
    """Row lookup for a sorted, unique cell set, queried at shifted positions.

    Uses a dense table over the padded bounding box when it is small enough,
    otherwise binary search over the packed keys. Both give the same rows.
    """

    def __init__(self, coords: np.ndarray, query: np.ndarray, pad: int):
        self.query = query
        self.table = None
        if coords.shape[0] and query.shape[0]:
            lo = coords.min(axis=0) - pad
            shape = coords.max(axis=0) + pad - lo + 1
            rel = query - lo
            inside = rel.min() >= 1 and (rel.max(axis=0) <= shape - 2).all()
            if inside and int(np.prod(shape)) <= _DENSE_LIMIT:
                self.table = np.full(int(np.prod(shape)), -1, dtype=np.int64)
                self.strides = np.array([shape[1] * shape[2], shape[2], 1], dtype=np.int64)
                self.table[(coords - lo) @ self.strides] = np.arange(coords.shape[0])
                self.base = rel @ self.strides
                return
        self.keys = encode_keys(coords)

    def rows(self, off: np.ndarray) -> np.ndarray:
        if self.table is not None:
            return self.table[self.base + off @ self.strides]
        return _lookup(self.keys, encode_keys(self.query + off))


def _rulebook(index: _CellIndex, n_in: int, n_out: int) -> Rulebook:
    ks, ins, outs = [], [], []
    out_rows = np.arange(n_out)
    for k, off in enumerate(OFFSETS):
        src = index.rows(off)
        hit = src >= 0
        ks.append(np.full(int(hit.sum()), k, dtype=np.int64))
        ins.append(src[hit])
        outs.append(out_rows[hit])
    return Rulebook.from_pairs(np.concatenate(ks), np.concatenate(ins), np.concatenate(outs), n_in, n_out)


def submanifold_rulebook(coords: np.ndarray) -> Rulebook:
    """Stride-1 3^3 rulebook; output cell set == input cell set."""
    coords = np.asarray(coords, dtype=np.int64)
    n = coords.shape[0]
    return _rulebook(_CellIndex(coords, coords, 1), n, n)


def downsample_coords(coords: np.ndarray) -> np.ndarray:
    if coords.shape[0] == 0:
        return coords.copy()
    return decode_keys(np.unique(encode_keys(np.floor_divide(coords, 2))))


def strided_rulebook(fine: np.ndarray, coarse: np.ndarray) -> Rulebook:
    """Stride-2 3^3 rulebook: coarse cell q gathers fine cells ``2q + offset``."""
    fine = np.asarray(fine, dtype=np.int64)
    coarse = np.asarray(coarse, dtype=np.int64)
    # 2q lies in [fine - 1, fine], so 2q + offset stays within two cells of the fine box
    return _rulebook(_CellIndex(fine, 2 * coarse, 2), fine.shape[0], coarse.shape[0])


@dataclass(frozen=True, eq=False)
class SparseGeometry:
    """Cell sets for every encoder level plus the rulebooks connecting them."""

    sizes: tuple  # cells per level
    subm: tuple  # stride-1 rulebook per level
    down: tuple  # down[l] maps level l -> l + 1
    batch_sizes: tuple = ()  # level-0 cells per scan when batched

    @property
    def n_levels(self) -> int:
        return len(self.sizes)

    @staticmethod
    def build(coords: np.ndarray, n_levels: int) -> "SparseGeometry":
        coords = np.asarray(coords, dtype=np.int64)
        levels = [coords]
        for _ in range(1, n_levels):
            levels.append(downsample_coords(levels[-1]))
        subm = tuple(submanifold_rulebook(c) for c in levels[: max(1, n_levels - 1)])
        down = tuple(strided_rulebook(levels[l], levels[l + 1]) for l in range(n_levels - 1))
        return SparseGeometry(tuple(c.shape[0] for c in levels), subm, down, (coords.shape[0],))

    @staticmethod
    def concat(geoms: List["SparseGeometry"]) -> "SparseGeometry":
        n_levels = geoms[0].n_levels
        sizes = tuple(sum(g.sizes[l] for g in geoms) for l in range(n_levels))
        subm = tuple(Rulebook.concat([g.subm[l] for g in geoms]) for l in range(len(geoms[0].subm)))
        down = tuple(Rulebook.concat([g.down[l] for g in geoms]) for l in range(n_levels - 1))
        return SparseGeometry(sizes, subm, down, tuple(g.sizes[0] for g in geoms))
