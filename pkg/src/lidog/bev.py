"""Sparse-to-dense bird's-eye-view projection of voxel features and labels.

Pixel (u, v) indexes the x and z axes respectively; rasters are stored as
``[v, u]`` (row v = 0 first). Bounds are half-open: ``-b <= x < b``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._ext import kernels
from .core import IGNORE
from .errors import FormatError, ValidationError
from .voxel import VoxelGrid


@dataclass(frozen=True)
class BevProjectionConfig:
    b_x: float = 50.0
    b_z: float = 50.0
    width: int = 168
    height: int = 168
    collision_seed: int = 0

    def __post_init__(self):
        if not (self.b_x > 0 and self.b_z > 0):
            raise ValidationError("projection bounds must be positive")
        if self.width < 1 or self.height < 1:
            raise ValidationError("BEV raster must be at least 1x1")

    @property
    def x_q(self) -> float:
        return 2.0 * self.b_x / self.width

    @property
    def z_q(self) -> float:
        return 2.0 * self.b_z / self.height

    @property
    def shape(self) -> tuple:
        return (self.height, self.width)

    def with_area(self, side: float) -> "BevProjectionConfig":
        """Square projection area of ``side`` x ``side`` meters at the same raster size."""
        return replace(self, b_x=side / 2.0, b_z=side / 2.0)

    def with_resolution(self, fraction: float) -> "BevProjectionConfig":
        """Rescale the raster (0.5, 0.75, 1.0 of the full size); bounds stay fixed."""
        return replace(
            self,
            width=max(1, int(round(self.width * fraction))),
            height=max(1, int(round(self.height * fraction))),
        )

    def with_seed(self, seed: int) -> "BevProjectionConfig":
        return replace(self, collision_seed=int(seed))


class _OutOfBounds:
    _inst = None

    def __new__(cls):
        if cls._inst is None:
            cls._inst = super().__new__(cls)
        return cls._inst

    def __repr__(self):
        return "OutOfBounds"

    def __bool__(self):
        return False


OutOfBounds = _OutOfBounds()


def project_indices(x, z, cfg: BevProjectionConfig):
    """Vectorized projection. Returns ``(u, v, valid)``; u, v are meaningless where not valid."""
    x = np.asarray(x, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    valid = (x >= -cfg.b_x) & (x < cfg.b_x) & (z >= -cfg.b_z) & (z < cfg.b_z)
    u = np.floor((x + cfg.b_x) / cfg.x_q)
    v = np.floor((z + cfg.b_z) / cfg.z_q)
    # float rounding can push x just below b onto index == width
    u = np.clip(np.where(valid, u, 0), 0, cfg.width - 1).astype(np.int64)
    v = np.clip(np.where(valid, v, 0), 0, cfg.height - 1).astype(np.int64)
    return u, v, valid


def project_index(x: float, z: float, cfg: BevProjectionConfig):
    u, v, ok = project_indices(x, z, cfg)
    if not ok:
        return OutOfBounds
    return int(u), int(v)


def voxel_pixels(centroids: np.ndarray, cfg: BevProjectionConfig) -> np.ndarray:
    """Flat pixel id ``v * width + u`` per voxel, -1 when out of bounds."""
    if centroids.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    u, v, ok = project_indices(centroids[:, 0], centroids[:, 2], cfg)
    return np.where(ok, v * cfg.width + u, -1)


def collision_winners(grid: VoxelGrid, cfg: BevProjectionConfig) -> np.ndarray:
    """Winning voxel index per pixel (flat, -1 when empty).

    Each voxel draws one priority from the seeded stream; the highest priority
    wins its pixel, which is a uniform choice among the colliders. Features and
    labels both read this one draw.
    """
    return winners_from_centroids(grid.centroids, cfg)


def winners_from_centroids(centroids: np.ndarray, cfg: BevProjectionConfig) -> np.ndarray:
    pix = voxel_pixels(centroids, cfg)
    priority = np.random.default_rng(cfg.collision_seed).random(pix.shape[0])
    return kernels.select_winners(pix, priority, cfg.width * cfg.height)


@dataclass(frozen=True, eq=False)
class DenseFeatureMap:
    features: np.ndarray  # (H, W, C)
    occupancy: np.ndarray  # (H, W) bool
    source: Optional[np.ndarray] = None  # (H, W) winning voxel index or -1

    @property
    def shape(self):
        return self.features.shape


def project_features(grid: VoxelGrid, feats: np.ndarray, cfg: BevProjectionConfig) -> DenseFeatureMap:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != len(grid):
        raise ValidationError(f"feature rows {feats.shape[0] if feats.ndim else 0} != voxel count {len(grid)}")
    return scatter_features(feats, collision_winners(grid, cfg), cfg)


def scatter_features(feats: np.ndarray, winners: np.ndarray, cfg: BevProjectionConfig) -> DenseFeatureMap:
    c = feats.shape[1]
    dense = np.zeros((cfg.height * cfg.width, c))
    occ = winners >= 0
    dense[occ] = feats[winners[occ]]
    return DenseFeatureMap(
        dense.reshape(cfg.height, cfg.width, c),
        occ.reshape(cfg.height, cfg.width),
        winners.reshape(cfg.height, cfg.width),
    )


def project_labels(grid: VoxelGrid, cfg: BevProjectionConfig) -> np.ndarray:
    return labels_from_winners(grid.labels, collision_winners(grid, cfg), cfg)


def labels_from_winners(labels: np.ndarray, winners: np.ndarray, cfg: BevProjectionConfig) -> np.ndarray:
    out = np.full(winners.shape[0], IGNORE, dtype=np.int64)
    occ = winners >= 0
    out[occ] = labels[winners[occ]]
    return out.reshape(cfg.height, cfg.width)


def pooled_size(dim: int, window: int = 5, stride: int = 3, padding: int = 1) -> int:
    return (dim + 2 * padding - window) // stride + 1


def check_pool_args(h: int, w: int, window: int, stride: int, padding: int):
    if window < 1 or stride < 1 or padding < 0 or padding >= window:
        raise ValidationError(f"invalid pooling window={window} stride={stride} padding={padding}")
    ho, wo = pooled_size(h, window, stride, padding), pooled_size(w, window, stride, padding)
    if ho < 1 or wo < 1:
        raise ValidationError(f"pooling {h}x{w} with window={window} stride={stride} gives an empty output")
    return ho, wo


def pool_features(fmap: DenseFeatureMap, window: int = 5, stride: int = 3, padding: int = 1) -> DenseFeatureMap:
    """Per-channel max pooling. Padding never wins, so all-zero maps stay all-zero."""
    h, w, c = fmap.features.shape
    check_pool_args(h, w, window, stride, padding)
    y, _ = kernels.maxpool2d_forward(np.ascontiguousarray(fmap.features[None]), window, stride, padding)
    occ, _ = kernels.maxpool2d_forward(
        np.ascontiguousarray(fmap.occupancy[None, :, :, None].astype(np.float64)), window, stride, padding
    )
    return DenseFeatureMap(y[0], occ[0, :, :, 0] > 0)


def _factor_pair(factor):
    if np.ndim(factor) == 0:
        return float(factor), float(factor)
    fy, fx = factor
    return float(fy), float(fx)


def downsample_labels(labels: np.ndarray, factor) -> np.ndarray:
    """Nearest-neighbour subsampling on pixel centres; exact ties take the top-left pixel.

    ``factor`` is a scalar or a ``(rows, cols)`` pair, each >= 1.
    """
    labels = np.asarray(labels)
    fy, fx = _factor_pair(factor)
    if fy < 1 or fx < 1:
        raise ValidationError(f"downsampling factor must be >= 1, got {factor}")
    h, w = labels.shape
    ho = max(1, int(math.floor(h / fy + 1e-9)))
    wo = max(1, int(math.floor(w / fx + 1e-9)))
    # source centre r + 0.5 nearest to (i + 0.5) * f; ceil(. - 1) lands on the lower index at ties
    rows = np.clip(np.ceil((np.arange(ho) + 0.5) * fy - 1.0 - 1e-9), 0, h - 1).astype(np.int64)
    cols = np.clip(np.ceil((np.arange(wo) + 0.5) * fx - 1.0 - 1e-9), 0, w - 1).astype(np.int64)
    return labels[rows[:, None], cols[None, :]]


def labels_for_shape(labels: np.ndarray, shape) -> np.ndarray:
    """Subsample a label raster onto ``shape`` (e.g. the pooled feature grid)."""
    h, w = labels.shape
    return downsample_labels(labels, (h / shape[0], w / shape[1]))


def write_pgm(labels: np.ndarray, path) -> None:
    """8-bit binary PGM: pixel = ClassId, 255 = IGNORE, row v = 0 first."""
    labels = np.asarray(labels)
    if np.any(labels >= 255):
        raise ValidationError("class ids must be < 255 for PGM export")
    img = np.where(labels == IGNORE, 255, labels).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise FormatError(f"{path} is not a binary PGM", offset=0)
    w, h, maxval = (int(g) for g in m.groups())
    body = data[m.end():]
    if maxval != 255 or len(body) != w * h:
        raise FormatError(f"unexpected PGM payload in {path}", offset=len(data) - len(body))
    img = np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.int64)
    img[img == 255] = IGNORE
    return img
