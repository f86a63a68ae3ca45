"""Sparse voxelization of point clouds.

Cells are stored in canonical order, lexicographic on the integer key (i, j, k).
Arrays rather than dicts keep alignment with feature tensors trivial.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .core import IGNORE, PointCloud
from .errors import ValidationError

KEY_BITS = 21
KEY_BIAS = 1 << (KEY_BITS - 1)
_KEY_MASK = (1 << KEY_BITS) - 1

DEFAULT_VOXEL_SIZE = 0.05
DEFAULT_COUNT_CAP = 10.0


def encode_keys(ijk: np.ndarray) -> np.ndarray:
    """Pack integer (i, j, k) triples into int64 so that integer order == lexicographic order."""
    ijk = np.asarray(ijk, dtype=np.int64).reshape(-1, 3)
    b = ijk + KEY_BIAS
    if b.size and (b.min() < 0 or b.max() > _KEY_MASK):
        raise ValidationError("voxel index out of the representable range")
    return (b[:, 0] << (2 * KEY_BITS)) | (b[:, 1] << KEY_BITS) | b[:, 2]


def decode_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.asarray(keys, dtype=np.int64)
    out = np.stack([(keys >> (2 * KEY_BITS)) & _KEY_MASK, (keys >> KEY_BITS) & _KEY_MASK, keys & _KEY_MASK], axis=1)
    return out - KEY_BIAS


class VoxelCell(NamedTuple):
    point_indices: np.ndarray
    label: int
    centroid: np.ndarray


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    voxel_size: float
    coords: np.ndarray  # (M, 3) int64, canonical order
    labels: np.ndarray  # (M,) int64, IGNORE allowed
    centroids: np.ndarray  # (M, 3)
    intensity: np.ndarray  # (M,) mean member intensity
    counts: np.ndarray  # (M,)
    point_order: np.ndarray  # point indices grouped by cell
    cell_ptr: np.ndarray  # (M + 1,) offsets into point_order
    point_cell: np.ndarray  # (N,) cell of each point

    def __len__(self):
        return self.coords.shape[0]

    @property
    def num_points(self) -> int:
        return self.point_cell.shape[0]

    @property
    def keys(self) -> np.ndarray:
        return encode_keys(self.coords)

    def point_indices(self, cell: int) -> np.ndarray:
        return self.point_order[self.cell_ptr[cell] : self.cell_ptr[cell + 1]]

    def cell(self, cell: int) -> VoxelCell:
        return VoxelCell(self.point_indices(cell), int(self.labels[cell]), self.centroids[cell])

    @property
    def cells(self) -> dict:
        """(i, j, k) -> VoxelCell, in canonical order."""
        return {tuple(int(v) for v in self.coords[c]): self.cell(c) for c in range(len(self))}

    def features(self, count_cap: float = DEFAULT_COUNT_CAP) -> np.ndarray:
        """Network input per cell: centroid offset in the cell (3), mean intensity, capped count."""
        offset = self.centroids / self.voxel_size - self.coords
        offset = np.clip(offset, 0.0, np.nextafter(1.0, 0.0))
        occ = np.minimum(self.counts / count_cap, 1.0)
        return np.column_stack([offset, self.intensity, occ]).astype(np.float64)


def majority_labels(cell_of_point: np.ndarray, labels: np.ndarray, n_cells: int) -> np.ndarray:
    """Majority vote per cell; IGNORE votes dropped, ties to the lowest id, all-IGNORE -> IGNORE."""
    out = np.full(n_cells, IGNORE, dtype=np.int64)
    valid = labels != IGNORE
    if not valid.any():
        return out
    k = int(labels[valid].max()) + 1
    votes = np.bincount(cell_of_point[valid] * k + labels[valid], minlength=n_cells * k).reshape(n_cells, k)
    has = votes.sum(axis=1) > 0
    out[has] = np.argmax(votes[has], axis=1)
    return out


def voxelize(cloud: PointCloud, voxel_size: float = DEFAULT_VOXEL_SIZE) -> VoxelGrid:
    if not voxel_size > 0:
        raise ValidationError(f"voxel_size must be positive, got {voxel_size}")
    xyz = cloud.xyz
    n = xyz.shape[0]
    ijk = np.floor(xyz / voxel_size).astype(np.int64)
    keys = encode_keys(ijk)
    uniq, inv = np.unique(keys, return_inverse=True)
    inv = inv.reshape(-1)
    m = uniq.shape[0]
    counts = np.bincount(inv, minlength=m)
    order = np.argsort(inv, kind="stable")
    ptr = np.zeros(m + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    centroids = np.zeros((m, 3))
    for a in range(3):
        centroids[:, a] = np.bincount(inv, weights=xyz[:, a], minlength=m)
    safe = np.maximum(counts, 1)
    centroids /= safe[:, None]
    inten = np.bincount(inv, weights=cloud.intensity, minlength=m) / safe
    if cloud.labels is None:
        labels = np.full(m, IGNORE, dtype=np.int64)
    else:
        labels = majority_labels(inv, cloud.labels, m)
    return VoxelGrid(
        voxel_size=float(voxel_size),
        coords=decode_keys(uniq),
        labels=labels,
        centroids=centroids,
        intensity=inten,
        counts=counts.astype(np.int64),
        point_order=order.astype(np.int64),
        cell_ptr=ptr,
        point_cell=inv.astype(np.int64) if n else np.zeros(0, dtype=np.int64),
    )


def unvoxelize_predictions(grid: VoxelGrid, per_cell, cloud_len: int) -> np.ndarray:
    per_cell = np.asarray(per_cell, dtype=np.int64)
    if per_cell.shape[0] != len(grid):
        raise ValidationError(f"{per_cell.shape[0]} predictions for {len(grid)} cells")
    if cloud_len != grid.num_points:
        raise ValidationError(f"cloud has {cloud_len} points, grid was built from {grid.num_points}")
    return per_cell[grid.point_cell]
