"""Dual-head segmentation network: sparse 3D encoder-decoder, sparse 3D head, dense BEV head.

The forward pass records a tape of ``(kind, inputs, params, output, cache)``
entries; :func:`backward` walks it in reverse. Heads emit logits, softmax lives
in the loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..bev import BevProjectionConfig, check_pool_args, winners_from_centroids
from ..errors import NumericError, UsageError, ValidationError
from ..seeding import rng_for
from ..voxel import VoxelGrid
from . import layers as L
from .sparse import N_OFFSETS, SparseGeometry


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 5
    widths: tuple = (8, 16)
    kernel_size: int = 3
    bev_channels: tuple = (16, 8)
    num_classes: int = 7
    use_bev: bool = True
    double_head: bool = False
    skip: str = "concat"
    bn_momentum: float = 0.1
    pool_window: int = 5
    pool_stride: int = 3
    pool_padding: int = 1

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        object.__setattr__(self, "bev_channels", tuple(int(w) for w in self.bev_channels))
        if len(self.widths) < 1:
            raise ValidationError("at least one encoder level is required")
        if self.kernel_size != 3:
            raise ValidationError("only 3x3x3 sparse kernels are supported")
        if self.skip != "concat":
            raise ValidationError("only concatenation skip connections are supported")
        if len(self.bev_channels) != 2:
            raise ValidationError("the BEV head has exactly three conv layers (two hidden widths)")
        if self.num_classes < 1 or self.input_channels < 1:
            raise ValidationError("num_classes and input_channels must be positive")

    @property
    def n_levels(self) -> int:
        return len(self.widths)

    @property
    def feature_channels(self) -> int:
        return self.widths[0]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["bev_channels"] = list(self.bev_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelParams:
    weights: Dict[str, np.ndarray] = field(default_factory=dict)
    buffers: Dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.weights.items()}, {k: v.copy() for k, v in self.buffers.items()})

    def num_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())


def param_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Ordered name -> shape map; 3D-branch entries come first."""
    w = cfg.widths
    k3 = N_OFFSETS
    shapes = {"enc0.conv.weight": (k3, cfg.input_channels, w[0]), "enc0.bn.gamma": (w[0],), "enc0.bn.beta": (w[0],)}
    for l in range(1, cfg.n_levels):
        shapes[f"enc{l}.down.weight"] = (k3, w[l - 1], w[l])
        shapes[f"enc{l}.bn.gamma"] = (w[l],)
        shapes[f"enc{l}.bn.beta"] = (w[l],)
    for l in range(cfg.n_levels - 2, -1, -1):
        shapes[f"dec{l}.up.weight"] = (k3, w[l + 1], w[l])
        shapes[f"dec{l}.up_bn.gamma"] = (w[l],)
        shapes[f"dec{l}.up_bn.beta"] = (w[l],)
        shapes[f"dec{l}.fuse.weight"] = (k3, 2 * w[l], w[l])
        shapes[f"dec{l}.fuse_bn.gamma"] = (w[l],)
        shapes[f"dec{l}.fuse_bn.beta"] = (w[l],)
    heads = ["head3d", "head3d_b"] if cfg.double_head else ["head3d"]
    for h in heads:
        shapes[f"{h}.weight"] = (w[0], cfg.num_classes)
        shapes[f"{h}.bias"] = (cfg.num_classes,)
    if cfg.use_bev:
        c = [w[0], *cfg.bev_channels, cfg.num_classes]
        for i in range(3):
            shapes[f"bev.conv{i}.weight"] = (3, 3, c[i], c[i + 1])
            if i < 2:
                shapes[f"bev.bn{i}.gamma"] = (c[i + 1],)
                shapes[f"bev.bn{i}.beta"] = (c[i + 1],)
        shapes["bev.conv2.bias"] = (cfg.num_classes,)
    return shapes


def _fan_in(name, shape):
    if len(shape) == 3:
        return shape[0] * shape[1]
    if len(shape) == 4:
        return shape[0] * shape[1] * shape[2]
    return shape[0]


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """He-uniform weights, each tensor from its own stream keyed by (seed, name).

    Keying by name keeps the 3D branch identical whether or not the BEV head exists.
    """
    weights, buffers = {}, {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".gamma"):
            weights[name] = np.ones(shape)
            base = name[: -len(".gamma")]
            buffers[base + ".running_mean"] = np.zeros(shape)
            buffers[base + ".running_var"] = np.ones(shape)
        elif name.endswith(".beta") or name.endswith(".bias"):
            weights[name] = np.zeros(shape)
        else:
            limit = np.sqrt(6.0 / _fan_in(name, shape))
            weights[name] = rng_for(seed, "init", name).uniform(-limit, limit, size=shape)
    return ModelParams(weights, buffers)


def zero_params(cfg: ModelConfig) -> ModelParams:
    p = init_params(cfg, 0)
    return ModelParams({k: np.zeros_like(v) for k, v in p.weights.items()}, p.buffers)


@dataclass(eq=False)
class SparseBatch:
    """One or more voxelized scans packed for a single forward pass."""

    feats: np.ndarray  # (N, Cin)
    geometry: SparseGeometry
    winners: Optional[np.ndarray] = None  # (B * H * W,) winning voxel row or -1
    bev_shape: Optional[tuple] = None  # (B, H, W)

    @property
    def n_scans(self) -> int:
        return len(self.geometry.batch_sizes)

    @property
    def scan_slices(self) -> List[slice]:
        out, start = [], 0
        for n in self.geometry.batch_sizes:
            out.append(slice(start, start + n))
            start += n
        return out


def make_batch(
    feats_list: Sequence[np.ndarray],
    geoms: Sequence[SparseGeometry],
    winners_list: Optional[Sequence[np.ndarray]] = None,
    bev_hw: Optional[tuple] = None,
) -> SparseBatch:
    feats = np.concatenate(feats_list, axis=0) if len(feats_list) > 1 else np.asarray(feats_list[0])
    geom = SparseGeometry.concat(list(geoms)) if len(geoms) > 1 else geoms[0]
    winners = shape = None
    if winners_list is not None:
        parts, off = [], 0
        for w, n in zip(winners_list, geom.batch_sizes):
            parts.append(np.where(w >= 0, w + off, -1))
            off += n
        winners = np.concatenate(parts)
        shape = (len(winners_list), bev_hw[0], bev_hw[1])
    return SparseBatch(np.ascontiguousarray(feats, dtype=np.float64), geom, winners, shape)


def batch_from_grid(grid: VoxelGrid, cfg: ModelConfig, bev_cfg: Optional[BevProjectionConfig] = None) -> SparseBatch:
    geom = SparseGeometry.build(grid.coords, cfg.n_levels)
    feats = grid.features()
    winners = None if bev_cfg is None else [winners_from_centroids(grid.centroids, bev_cfg)]
    return make_batch([feats], [geom], winners, None if bev_cfg is None else bev_cfg.shape)


class Tape:
    def __init__(self):
        self.entries = []
        self.values = []
        self.running = {}
        self.used = False
        self.outputs = (None, None, None)

    def value(self, arr) -> int:
        self.values.append(arr)
        return len(self.values) - 1

    def record(self, kind, inputs, params, out, cache) -> int:
        oid = self.value(out)
        self.entries.append((kind, inputs, params, oid, cache))
        return oid


@dataclass(eq=False)
class ForwardResult:
    logits3d: np.ndarray
    logits_bev: Optional[np.ndarray]
    tape: Tape
    logits3d_b: Optional[np.ndarray] = None

    def __iter__(self):
        return iter((self.logits3d, self.logits_bev, self.tape))


def _check(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(name)


def _validate(params: ModelParams, cfg: ModelConfig, batch: SparseBatch):
    shapes = param_shapes(cfg)
    for name, shape in shapes.items():
        if name not in params.weights:
            raise ValidationError(f"missing parameter '{name}'")
        if params.weights[name].shape != shape:
            raise ValidationError(f"parameter '{name}' has shape {params.weights[name].shape}, expected {shape}")
    if batch.feats.shape != (batch.geometry.sizes[0], cfg.input_channels):
        raise ValidationError(
            f"input features {batch.feats.shape} do not match ({batch.geometry.sizes[0]}, {cfg.input_channels})"
        )
    if batch.geometry.n_levels != cfg.n_levels:
        raise ValidationError("geometry levels do not match the encoder depth")


def forward_batch(
    params: ModelParams, batch: SparseBatch, cfg: ModelConfig, training: bool = True, compute_bev: bool = True
) -> ForwardResult:
    _validate(params, cfg, batch)
    W = params.weights
    tape = Tape()
    geom = batch.geometry

    def sconv(x, name, rb):
        y, cache = L.sparse_conv_forward(tape.values[x], W[name], rb)
        _check(name, y)
        return tape.record("sconv", (x,), (name,), y, cache)

    def bn(x, name):
        y, cache = L.batchnorm_forward(
            tape.values[x],
            W[name + ".gamma"],
            W[name + ".beta"],
            params.buffers[name + ".running_mean"],
            params.buffers[name + ".running_var"],
            training,
            cfg.bn_momentum,
        )
        _check(name, y)
        if training:
            tape.running[name] = cache[4]
        return tape.record("bn", (x,), (name + ".gamma", name + ".beta"), y, cache)

    def relu(x):
        y, mask = L.relu_forward(tape.values[x])
        return tape.record("relu", (x,), (), y, mask)

    h = tape.value(batch.feats)
    h = relu(bn(sconv(h, "enc0.conv.weight", geom.subm[0]), "enc0.bn"))
    skips = [h]
    for l in range(1, cfg.n_levels):
        h = relu(bn(sconv(h, f"enc{l}.down.weight", geom.down[l - 1]), f"enc{l}.bn"))
        skips.append(h)
    for l in range(cfg.n_levels - 2, -1, -1):
        h = relu(bn(sconv(h, f"dec{l}.up.weight", geom.down[l].transpose()), f"dec{l}.up_bn"))
        a, b = tape.values[h], tape.values[skips[l]]
        h = tape.record("concat", (h, skips[l]), (), np.concatenate([a, b], axis=1), a.shape[1])
        h = relu(bn(sconv(h, f"dec{l}.fuse.weight", geom.subm[l]), f"dec{l}.fuse_bn"))
    feat = h

    def head(name):
        y, cache = L.linear_forward(tape.values[feat], W[name + ".weight"], W[name + ".bias"])
        _check(name, y)
        return tape.record("linear", (feat,), (name + ".weight", name + ".bias"), y, cache)

    out3d = head("head3d")
    out3d_b = head("head3d_b") if cfg.double_head else None

    def reshape(x, shape):
        src = tape.values[x].shape
        return tape.record("reshape", (x,), (), tape.values[x].reshape(shape), src)

    out_bev = None
    if cfg.use_bev and compute_bev:
        if batch.winners is None:
            raise ValidationError("BEV branch requested but the batch carries no projection")
        nb, hh, ww = batch.bev_shape
        check_pool_args(hh, ww, cfg.pool_window, cfg.pool_stride, cfg.pool_padding)
        dense, cache = L.scatter_forward(tape.values[feat], batch.winners, nb, hh, ww)
        x = tape.record("scatter", (feat,), (), dense, cache)
        y, cache = L.maxpool_forward(dense, cfg.pool_window, cfg.pool_stride, cfg.pool_padding)
        x = tape.record("maxpool", (x,), (), y, cache)
        for i in range(3):
            wname = f"bev.conv{i}.weight"
            bias = W["bev.conv2.bias"] if i == 2 else None
            y, cache = L.conv2d_forward(tape.values[x], W[wname], bias)
            _check(f"bev.conv{i}", y)
            x = tape.record("conv2d", (x,), (wname, "bev.conv2.bias") if i == 2 else (wname,), y, cache)
            if i < 2:
                flat = relu(bn(reshape(x, (-1, y.shape[-1])), f"bev.bn{i}"))
                x = reshape(flat, y.shape)
        out_bev = x

    tape.outputs = (out3d, out3d_b, out_bev)
    return ForwardResult(
        tape.values[out3d],
        None if out_bev is None else tape.values[out_bev],
        tape,
        None if out3d_b is None else tape.values[out3d_b],
    )


def forward(
    params: ModelParams,
    grid: VoxelGrid,
    cfg: ModelConfig,
    bev_cfg: Optional[BevProjectionConfig] = None,
    training: bool = True,
) -> ForwardResult:
    """Run the model on one voxel grid. ``bev_cfg=None`` skips the BEV branch."""
    batch = batch_from_grid(grid, cfg, bev_cfg if cfg.use_bev else None)
    return forward_batch(params, batch, cfg, training=training, compute_bev=bev_cfg is not None)


def backward(tape: Tape, grad_logits3d, grad_logits_bev=None) -> Dict[str, np.ndarray]:
    """Reverse-mode gradients for every parameter touched by the forward pass.

    ``grad_logits3d`` may be a pair ``(g_head, g_head_b)`` for double-head models.
    A tape can be consumed only once.
    """
    if tape.used:
        raise UsageError("tape already consumed by a previous backward call")
    tape.used = True
    out3d, out3d_b, out_bev = tape.outputs
    grads_v: Dict[int, np.ndarray] = {}

    def seed(vid, g):
        if vid is None or g is None:
            return
        g = np.asarray(g, dtype=np.float64)
        if g.shape != tape.values[vid].shape:
            raise ValidationError(f"upstream gradient shape {g.shape} != output shape {tape.values[vid].shape}")
        grads_v[vid] = grads_v.get(vid, 0) + g

    if isinstance(grad_logits3d, (tuple, list)):
        seed(out3d, grad_logits3d[0])
        if len(grad_logits3d) > 1:
            seed(out3d_b, grad_logits3d[1])
    else:
        seed(out3d, grad_logits3d)
    seed(out_bev, grad_logits_bev)

    grads: Dict[str, np.ndarray] = {}

    def acc(vid, g):
        if vid in grads_v:
            grads_v[vid] = grads_v[vid] + g
        else:
            grads_v[vid] = g

    for kind, inputs, pnames, oid, cache in reversed(tape.entries):
        gy = grads_v.pop(oid, None)
        if gy is None:
            continue
        if kind == "sconv":
            gx, gw = L.sparse_conv_backward(gy, cache)
            grads[pnames[0]] = gw
            acc(inputs[0], gx)
        elif kind == "bn":
            gx, gg, gb = L.batchnorm_backward(gy, cache)
            grads[pnames[0]], grads[pnames[1]] = gg, gb
            acc(inputs[0], gx)
        elif kind == "relu":
            acc(inputs[0], L.relu_backward(gy, cache))
        elif kind == "concat":
            acc(inputs[0], gy[:, :cache])
            acc(inputs[1], gy[:, cache:])
        elif kind == "linear":
            gx, gw, gb = L.linear_backward(gy, cache)
            grads[pnames[0]], grads[pnames[1]] = gw, gb
            acc(inputs[0], gx)
        elif kind == "scatter":
            acc(inputs[0], L.scatter_backward(gy, cache))
        elif kind == "maxpool":
            acc(inputs[0], L.maxpool_backward(gy, cache))
        elif kind == "conv2d":
            gx, gw, gb = L.conv2d_backward(gy, cache)
            grads[pnames[0]] = gw
            if len(pnames) > 1:
                grads[pnames[1]] = gb
            acc(inputs[0], gx)
        elif kind == "reshape":
            acc(inputs[0], gy.reshape(cache))
        else:  # pragma: no cover
            raise UsageError(f"unknown tape entry '{kind}'")
    return grads


def full_gradients(params: ModelParams, grads: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    """Gradient store shaped like ``params.weights``; untouched entries are zero."""
    return {k: grads.get(k, np.zeros_like(v)) for k, v in params.weights.items()}


def head_probabilities(res: ForwardResult) -> np.ndarray:
    p = L.softmax(res.logits3d)
    if res.logits3d_b is not None:
        p = 0.5 * (p + L.softmax(res.logits3d_b))
    return p


def predict_batch(params: ModelParams, batch: SparseBatch, cfg: ModelConfig) -> np.ndarray:
    res = forward_batch(params, batch, cfg, training=False, compute_bev=False)
    if res.logits3d_b is None:
        return np.argmax(res.logits3d, axis=1)
    return np.argmax(head_probabilities(res), axis=1)


def predict(params: ModelParams, grid: VoxelGrid, cfg: ModelConfig, bev_cfg=None) -> np.ndarray:
    """Per-voxel class ids; the BEV head is never evaluated. Ties go to the lowest id."""
    return predict_batch(params, batch_from_grid(grid, cfg, None), cfg)


def apply_running_stats(params: ModelParams, tape: Tape) -> None:
    for name, (mean, var) in tape.running.items():
        params.buffers[name + ".running_mean"] = mean
        params.buffers[name + ".running_var"] = var


def config_json(cfg: ModelConfig) -> str:
    return json.dumps(cfg.to_dict(), sort_keys=True)
