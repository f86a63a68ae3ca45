"""Training-time augmentations: rotation/scale/downsampling, Mix3D and PointCutMix."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import PointCloud
from .errors import ValidationError


@dataclass(frozen=True)
class AugmentConfig:
    rotation_bounds: tuple = (-math.pi / 2, math.pi / 2)
    scale_bounds: tuple = (0.95, 1.05)
    keep_fraction: float = 0.8
    patch_extent: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.rotation_bounds[0] > self.rotation_bounds[1] or self.scale_bounds[0] > self.scale_bounds[1]:
            raise ValidationError("augmentation bounds must be ordered (low, high)")
        if not 0 < self.keep_fraction <= 1:
            raise ValidationError("keep_fraction must lie in (0, 1]")


IDENTITY_AUGMENT = AugmentConfig(rotation_bounds=(0.0, 0.0), scale_bounds=(1.0, 1.0), keep_fraction=1.0)


def rotation_y(theta: float) -> np.ndarray:
    """Counter-clockwise about +y seen from above (right-handed): x -> (cos, 0, -sin)."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])


def random_transform(cloud: PointCloud, cfg: AugmentConfig, rng: np.random.Generator) -> PointCloud:
    theta = rng.uniform(*cfg.rotation_bounds)
    scale = rng.uniform(*cfg.scale_bounds)
    n = len(cloud)
    keep = math.ceil(cfg.keep_fraction * n - 1e-9)
    if keep < n:
        idx = np.sort(rng.choice(n, size=keep, replace=False))
    else:
        idx = np.arange(n)
    xyz = (cloud.xyz[idx] @ rotation_y(theta)) * scale
    labels = None if cloud.labels is None else cloud.labels[idx]
    return PointCloud(xyz, cloud.intensity[idx], labels, cloud.frame_id)


def _labels_or_none(a: PointCloud, b: PointCloud):
    if a.labels is None and b.labels is None:
        return None
    if a.labels is None or b.labels is None:
        raise ValidationError("cannot mix a labeled cloud with an unlabeled one")
    return np.concatenate([a.labels, b.labels])


def mix3d(a: PointCloud, b: PointCloud) -> PointCloud:
    """Concatenate two scenes, points and labels, without deduplication."""
    return PointCloud(
        np.concatenate([a.xyz, b.xyz]),
        np.concatenate([a.intensity, b.intensity]),
        _labels_or_none(a, b),
        a.frame_id,
    )


def point_cut_mix(a: PointCloud, b: PointCloud, patch_extent: float, rng: np.random.Generator) -> PointCloud:
    """Replace a cube of ``a`` (side ``patch_extent``, centred on a random point of ``a``) with ``b``'s points there."""
    if len(a) == 0:
        return a
    center = a.xyz[rng.integers(len(a))]
    half = patch_extent / 2.0
    in_a = np.all(np.abs(a.xyz - center) <= half, axis=1)
    in_b = np.all(np.abs(b.xyz - center) <= half, axis=1) if len(b) else np.zeros(0, dtype=bool)
    return mix3d(a.subset(np.flatnonzero(~in_a)), b.subset(np.flatnonzero(in_b)))
