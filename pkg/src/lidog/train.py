"""Soft DICE losses, the Adam optimizer and the joint 3D + BEV training loop.

DICE is computed per scan and averaged over the scans of a batch. Within a
scan the class average runs over classes present in the targets only.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from .augment import AugmentConfig, mix3d, point_cut_mix, random_transform
from .bev import BevProjectionConfig, labels_for_shape, labels_from_winners, pooled_size, winners_from_centroids
from .core import IGNORE, PointCloud
from .errors import ValidationError
from .net import layers as L
from .net.model import (
    ModelConfig,
    ModelParams,
    apply_running_stats,
    backward,
    forward_batch,
    init_params,
    make_batch,
)
from .net.sparse import SparseGeometry
from .seeding import derive_seed, rng_for
from .voxel import DEFAULT_COUNT_CAP, DEFAULT_VOXEL_SIZE, VoxelGrid, voxelize

log = logging.getLogger(__name__)

DICE_EPS = 1e-7
AUGMENTATIONS = ("none", "standard", "mix3d", "pointcutmix")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    loss_weights: tuple = (0.5, 0.5)
    augmentation: str = "none"
    voxel_size: float = DEFAULT_VOXEL_SIZE
    count_cap: float = DEFAULT_COUNT_CAP
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValidationError("learning_rate must be non-negative")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.augmentation not in AUGMENTATIONS:
            raise ValidationError(f"augmentation must be one of {AUGMENTATIONS}")
        object.__setattr__(self, "loss_weights", tuple(float(w) for w in self.loss_weights))


class DiceResult(NamedTuple):
    loss: float
    skipped: bool


def _one_hot_valid(targets, k):
    targets = np.asarray(targets).reshape(-1)
    valid = targets != IGNORE
    y = np.zeros((targets.shape[0], k))
    y[np.flatnonzero(valid), targets[valid]] = 1.0
    return y, valid


def dice_loss(probs, targets, num_classes: int, eps: float = DICE_EPS) -> DiceResult:
    """``1 - mean_c 2 sum(p*y) / (sum p + sum y + eps)`` over classes present in ``targets``.

    IGNORE targets are dropped from every sum. No valid element gives ``(0.0, True)``.
    """
    probs = np.asarray(probs, dtype=np.float64).reshape(-1, num_classes)
    y, valid = _one_hot_valid(targets, num_classes)
    if not valid.any():
        return DiceResult(0.0, True)
    p, y = probs[valid], y[valid]
    inter = (p * y).sum(axis=0)
    denom = p.sum(axis=0) + y.sum(axis=0) + eps
    present = y.sum(axis=0) > 0
    dice = 2.0 * inter / denom
    return DiceResult(float(1.0 - dice[present].mean()), False)


def dice_loss_grad(probs, targets, num_classes: int, eps: float = DICE_EPS) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    shape = probs.shape
    probs = probs.reshape(-1, num_classes)
    y, valid = _one_hot_valid(targets, num_classes)
    g = np.zeros_like(probs)
    if not valid.any():
        return g.reshape(shape)
    p, yv = probs[valid], y[valid]
    inter = (p * yv).sum(axis=0)
    denom = p.sum(axis=0) + yv.sum(axis=0) + eps
    present = yv.sum(axis=0) > 0
    # d(dice_c)/dp_ic = 2 y_ic / denom_c - 2 inter_c / denom_c^2
    dd = 2.0 * yv / denom - 2.0 * inter / denom**2
    g[valid] = -dd * present / present.sum()
    return g.reshape(shape)


def softmax_dice(logits, targets, num_classes: int):
    """Returns ``(loss, skipped, dlogits)`` for DICE on softmax(logits)."""
    p = L.softmax(np.asarray(logits, dtype=np.float64), axis=-1)
    res = dice_loss(p, targets, num_classes)
    if res.skipped:
        return 0.0, True, np.zeros_like(p)
    g = dice_loss_grad(p, targets, num_classes)
    return res.loss, False, L.softmax_backward(g, p, axis=-1)


class LossResult(NamedTuple):
    total: float
    l3d: float
    lbev: float
    grad3d: object  # array, or (array, array) for double-head models
    grad_bev: Optional[np.ndarray]


def _branch(logit_list, target_list, k):
    """Mean DICE over non-skipped scans and per-scan logit gradients."""
    losses, grads = [], []
    for lg, tg in zip(logit_list, target_list):
        loss, skipped, g = softmax_dice(lg, tg, k)
        losses.append(None if skipped else loss)
        grads.append(g)
    counted = [l for l in losses if l is not None]
    if not counted:
        return 0.0, [np.zeros_like(g) for g in grads]
    scale = 1.0 / len(counted)
    return float(np.mean(counted)), [g * scale for g in grads]


def total_loss(logits3d, labels3d, logits_bev=None, labels_bev=None, weights=(0.5, 0.5), num_classes=None):
    """Weighted sum of 3D and BEV DICE losses for a single scan.

    A branch with no valid targets contributes zero; the other keeps its weight.
    """
    k = num_classes or np.asarray(logits3d).shape[-1]
    l3d, _, g3d = softmax_dice(logits3d, labels3d, k)
    lbev, gbev = 0.0, None
    if logits_bev is not None:
        lbev, _, gbev = softmax_dice(logits_bev, labels_bev, k)
        gbev = gbev * weights[1]
    return LossResult(weights[0] * l3d + weights[1] * lbev, l3d, lbev, g3d * weights[0], gbev)


def batch_loss(res, batch, labels3d: Sequence[np.ndarray], labels_bev: Optional[Sequence[np.ndarray]], k, weights):
    """Losses and logit gradients for a packed batch (per-scan DICE, batch mean)."""
    slices = batch.scan_slices
    l3d, g_parts = _branch([res.logits3d[s] for s in slices], labels3d, k)
    g3d = np.concatenate(g_parts) * weights[0]
    if res.logits3d_b is not None:
        l3d_b, gb_parts = _branch([res.logits3d_b[s] for s in slices], labels3d, k)
        g3d_b = np.concatenate(gb_parts) * weights[1]
        return LossResult(weights[0] * l3d + weights[1] * l3d_b, l3d, l3d_b, (g3d, g3d_b), None)
    lbev, gbev = 0.0, None
    if res.logits_bev is not None:
        lbev, gb = _branch(list(res.logits_bev), labels_bev, k)
        gbev = np.stack(gb) * weights[1]
    return LossResult(weights[0] * l3d + weights[1] * lbev, l3d, lbev, g3d, gbev)


class Adam:
    def __init__(self, lr=0.01, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, weights: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in weights:
            g = grads.get(name)
            if g is None:
                continue
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            weights[name] = weights[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass(eq=False)
class Sample:
    """A voxelized scan ready for the network."""

    cloud: PointCloud
    grid: VoxelGrid
    feats: np.ndarray
    geometry: SparseGeometry

    @property
    def labels(self) -> np.ndarray:
        return self.grid.labels


def prepare_sample(cloud: PointCloud, voxel_size: float, n_levels: int, count_cap: float = DEFAULT_COUNT_CAP) -> Sample:
    grid = voxelize(cloud, voxel_size)
    return Sample(cloud, grid, grid.features(count_cap), SparseGeometry.build(grid.coords, n_levels))


def bev_targets(sample: Sample, bev_cfg: BevProjectionConfig, model_cfg: ModelConfig):
    """Winning voxel per pixel and the label raster subsampled onto the pooled grid."""
    winners = winners_from_centroids(sample.grid.centroids, bev_cfg)
    full = labels_from_winners(sample.grid.labels, winners, bev_cfg)
    pooled = (
        pooled_size(bev_cfg.height, model_cfg.pool_window, model_cfg.pool_stride, model_cfg.pool_padding),
        pooled_size(bev_cfg.width, model_cfg.pool_window, model_cfg.pool_stride, model_cfg.pool_padding),
    )
    return winners, labels_for_shape(full, pooled)


def pack(samples: Sequence[Sample], model_cfg: ModelConfig, bev_cfg: Optional[BevProjectionConfig], seeds=None):
    """Build a SparseBatch; ``seeds`` gives the per-scan collision seed for the BEV draw."""
    if model_cfg.use_bev and bev_cfg is not None:
        winners, bev_labels = [], []
        for i, s in enumerate(samples):
            cfg_i = bev_cfg if seeds is None else bev_cfg.with_seed(seeds[i])
            w, lab = bev_targets(s, cfg_i, model_cfg)
            winners.append(w)
            bev_labels.append(lab)
        batch = make_batch([s.feats for s in samples], [s.geometry for s in samples], winners, bev_cfg.shape)
        return batch, bev_labels
    return make_batch([s.feats for s in samples], [s.geometry for s in samples]), None


@dataclass
class TrainResult:
    params: ModelParams
    log: List[dict]

    def epoch_losses(self) -> List[float]:
        out: Dict[int, List[float]] = {}
        for row in self.log:
            out.setdefault(row["epoch"], []).append(row["ltot"])
        return [float(np.mean(v)) for _, v in sorted(out.items())]


def _epoch_batches(sizes: Sequence[int], batch_size: int, rng: np.random.Generator):
    """Round-robin over datasets, one batch at a time; each dataset shuffled independently."""
    queues = [list(rng.permutation(n)) for n in sizes]
    batches = []
    while any(queues):
        for d, q in enumerate(queues):
            if q:
                batches.append((d, q[:batch_size]))
                del q[:batch_size]
    return batches


def _augmented(cloud, d, datasets, cfg: TrainConfig, rng):
    if cfg.augmentation == "none":
        return cloud
    if cfg.augmentation in ("mix3d", "pointcutmix"):
        # partner from the other source when there is one
        pool = datasets[(d + 1) % len(datasets)]
        partner = pool[int(rng.integers(len(pool)))]
        if cfg.augmentation == "mix3d":
            cloud = mix3d(cloud, partner)
        else:
            cloud = point_cut_mix(cloud, partner, cfg.augment.patch_extent, rng)
    return random_transform(cloud, cfg.augment, rng)


def train(
    model_cfg: ModelConfig,
    datasets: Sequence[Sequence[PointCloud]],
    cfg: TrainConfig,
    bev_cfg: Optional[BevProjectionConfig] = None,
    params: Optional[ModelParams] = None,
    samples: Optional[Sequence[Sequence[Sample]]] = None,
    log_path=None,
) -> TrainResult:
    """Joint training of the 3D and BEV heads.

    ``datasets`` is one list of labeled clouds per source domain. ``samples``
    may carry pre-voxelized versions of the same clouds (used when no
    augmentation is active). Deterministic given ``cfg.seed``.
    """
    datasets = [list(d) for d in datasets]
    if not datasets or sum(len(d) for d in datasets) == 0:
        raise ValidationError("training needs at least one labeled scan")
    for d in datasets:
        for c in d:
            if c.labels is None:
                raise ValidationError(f"scan '{c.frame_id}' has no labels")
    datasets = [d for d in datasets if d]
    if model_cfg.use_bev and bev_cfg is None:
        bev_cfg = BevProjectionConfig()
    params = init_params(model_cfg, cfg.seed) if params is None else params.copy()
    if cfg.augmentation == "none" and samples is None:
        samples = [[prepare_sample(c, cfg.voxel_size, model_cfg.n_levels, cfg.count_cap) for c in d] for d in datasets]
    opt = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    k = model_cfg.num_classes
    rows = []
    step = 0
    for epoch in range(cfg.epochs):
        order_rng = rng_for(cfg.seed, "shuffle", epoch)
        for d, idx in _epoch_batches([len(x) for x in datasets], cfg.batch_size, order_rng):
            if cfg.augmentation == "none":
                batch_samples = [samples[d][i] for i in idx]
            else:
                batch_samples = []
                for i in idx:
                    rng = rng_for(cfg.seed, "augment", epoch, d, i)
                    cloud = _augmented(datasets[d][i], d, datasets, cfg, rng)
                    batch_samples.append(prepare_sample(cloud, cfg.voxel_size, model_cfg.n_levels, cfg.count_cap))
            # one draw per scan for the whole run so the BEV target stays fixed across epochs
            seeds = [derive_seed(cfg.seed, "collision", d, i) for i in idx]
            batch, bev_labels = pack(batch_samples, model_cfg, bev_cfg, seeds)
            res = forward_batch(params, batch, model_cfg, training=True)
            loss = batch_loss(res, batch, [s.labels for s in batch_samples], bev_labels, k, cfg.loss_weights)
            grads = backward(res.tape, loss.grad3d, loss.grad_bev)
            apply_running_stats(params, res.tape)
            opt.step(params.weights, grads)
            rows.append({"epoch": epoch, "step": step, "l3d": loss.l3d, "lbev": loss.lbev, "ltot": loss.total})
            step += 1
        log.debug("epoch %d loss %.4f", epoch, rows[-1]["ltot"] if rows else float("nan"))
    if log_path is not None:
        write_loss_log(rows, log_path)
    return TrainResult(params, rows)


def write_loss_log(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=["epoch", "step", "l3d", "lbev", "ltot"], lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if k in ("l3d", "lbev", "ltot") else v) for k, v in r.items()})
