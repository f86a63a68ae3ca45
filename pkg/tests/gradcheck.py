"""Central-difference gradient checks shared by the unit and acceptance suites.

Each case builds a random instance, returns a scalar objective that reads the
instance's arrays in place, the arrays to perturb, and the analytic gradients.
"""

import numpy as np

from lidog.core import IGNORE
from lidog.net import layers as L
from lidog.net.model import (
    ModelConfig,
    backward,
    forward_batch,
    init_params,
    make_batch,
)
from lidog.net.sparse import SparseGeometry, downsample_coords, strided_rulebook, submanifold_rulebook
from lidog.train import batch_loss, total_loss

from oracles import central_difference

H = 1e-4
REL_TOL = 1e-4
# below this gradient magnitude the relative error is meaningless; compare absolutely
ABS_FLOOR = 1e-7


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    a, n = np.asarray(analytic).ravel(), np.asarray(numeric).ravel()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def _coords(rng, n, span=3):
    pts = {tuple(rng.integers(0, span, 3)) for _ in range(n)}
    return np.array(sorted(pts), dtype=np.int64)


def _away_from_zero(rng, shape, gap=0.05):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * (gap + np.abs(x)), x)


def case_sparse_conv(rng):
    coords = _coords(rng, int(rng.integers(2, 9)))
    rb = submanifold_rulebook(coords)
    x = rng.normal(size=(len(coords), 2))
    w = rng.normal(size=(27, 2, 2))
    r = rng.normal(size=(len(coords), 2))
    f = lambda: float((L.sparse_conv_forward(x, w, rb)[0] * r).sum())
    _, cache = L.sparse_conv_forward(x, w, rb)
    gx, gw = L.sparse_conv_backward(r, cache)
    return f, [x, w], [gx, gw]


def _strided(rng, transpose):
    fine = _coords(rng, int(rng.integers(2, 10)), span=4)
    coarse = downsample_coords(fine)
    rb = strided_rulebook(fine, coarse)
    if transpose:
        rb = rb.transpose()
    x = rng.normal(size=(rb.n_in, 2))
    w = rng.normal(size=(27, 2, 3))
    r = rng.normal(size=(rb.n_out, 3))
    f = lambda: float((L.sparse_conv_forward(x, w, rb)[0] * r).sum())
    _, cache = L.sparse_conv_forward(x, w, rb)
    gx, gw = L.sparse_conv_backward(r, cache)
    return f, [x, w], [gx, gw]


def case_strided_conv(rng):
    return _strided(rng, False)


def case_transposed_conv(rng):
    return _strided(rng, True)


def case_batchnorm(rng):
    # from 3 rows up; two rows with near-equal values give a nearly singular variance
    n, c = int(rng.integers(3, 9)), 3
    x = rng.normal(size=(n, c)) * 2 + 1
    g, b = rng.normal(size=c), rng.normal(size=c)
    rm, rv = np.zeros(c), np.ones(c)
    r = rng.normal(size=(n, c))
    f = lambda: float((L.batchnorm_forward(x, g, b, rm, rv, True)[0] * r).sum())
    _, cache = L.batchnorm_forward(x, g, b, rm, rv, True)
    gx, gg, gb = L.batchnorm_backward(r, cache)
    return f, [x, g, b], [gx, gg, gb]


def case_relu(rng):
    x = _away_from_zero(rng, (int(rng.integers(1, 12)), 3))
    r = rng.normal(size=x.shape)
    f = lambda: float((L.relu_forward(x)[0] * r).sum())
    _, mask = L.relu_forward(x)
    return f, [x], [L.relu_backward(r, mask)]


def case_linear(rng):
    n = int(rng.integers(1, 6))
    x, w, b = rng.normal(size=(n, 3)), rng.normal(size=(3, 4)), rng.normal(size=4)
    r = rng.normal(size=(n, 4))
    f = lambda: float((L.linear_forward(x, w, b)[0] * r).sum())
    _, cache = L.linear_forward(x, w, b)
    return f, [x, w, b], list(L.linear_backward(r, cache))


def case_projection(rng):
    n, hh, ww = int(rng.integers(2, 10)), 4, 5
    feats = rng.normal(size=(n, 2))
    winners = np.full(hh * ww, -1)
    winners[rng.choice(hh * ww, size=min(n, hh * ww) - 1, replace=False)] = rng.permutation(n)[: min(n, hh * ww) - 1]
    r = rng.normal(size=(1, hh, ww, 2))
    f = lambda: float((L.scatter_forward(feats, winners, 1, hh, ww)[0] * r).sum())
    _, cache = L.scatter_forward(feats, winners, 1, hh, ww)
    return f, [feats], [L.scatter_backward(r, cache)]


def case_maxpool(rng):
    hh, ww = int(rng.integers(5, 10)), int(rng.integers(5, 10))
    # distinct values spaced well beyond h so the argmax never flips
    vals = rng.permutation(hh * ww * 2).astype(np.float64) * 0.01
    x = vals.reshape(1, hh, ww, 2)
    y, cache = L.maxpool_forward(x, 5, 3, 1)
    r = rng.normal(size=y.shape)
    f = lambda: float((L.maxpool_forward(x, 5, 3, 1)[0] * r).sum())
    return f, [x], [L.maxpool_backward(r, cache)]


def case_conv2d(rng):
    x = rng.normal(size=(1, int(rng.integers(2, 5)), int(rng.integers(2, 5)), 2))
    w, b = rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2)
    y, cache = L.conv2d_forward(x, w, b)
    r = rng.normal(size=y.shape)
    f = lambda: float((L.conv2d_forward(x, w, b)[0] * r).sum())
    gx, gw, gb = L.conv2d_backward(r, cache)
    return f, [x, w, b], [gx, gw, gb]


def _labels(rng, n, k, ignore_frac=0.2):
    lab = rng.integers(0, k, n)
    lab[rng.random(n) < ignore_frac] = IGNORE
    return lab


def case_dice_total(rng):
    k = int(rng.integers(2, 5))
    n = int(rng.integers(2, 10))
    l3 = rng.normal(size=(n, k))
    lb = rng.normal(size=(3, 3, k))
    y3, yb = _labels(rng, n, k), _labels(rng, 9, k).reshape(3, 3)
    f = lambda: total_loss(l3, y3, lb, yb).total
    res = total_loss(l3, y3, lb, yb)
    return f, [l3, lb], [res.grad3d, res.grad_bev]


RELU_MARGIN = 1e-2


def _relu_margin(tape):
    return min(np.abs(tape.values[inputs[0]]).min() for kind, inputs, *_ in tape.entries if kind == "relu")


def tiny_model_case(rng, double_head=False):
    """Composed network plus the dice-based total loss, under 500 parameters.

    Instances whose ReLU inputs come within ``RELU_MARGIN`` of zero are redrawn:
    an h = 1e-4 weight step can cross the kink there, and central differences
    then measure the jump rather than the derivative.
    """
    cfg = ModelConfig(widths=(2, 3), bev_channels=(2, 2), num_classes=3, use_bev=not double_head, double_head=double_head)
    while True:
        params = init_params(cfg, int(rng.integers(0, 2**31)))
        for k in params.weights:
            params.weights[k] = params.weights[k] + 0.1 * rng.normal(size=params.weights[k].shape)
        # four cube corners keep >= 4 cells on the coarse level; batch norm over one
        # or two rows is nearly degenerate and its curvature swamps h = 1e-4 differences
        corners = [[0, 0, 0], [3, 3, 3], [0, 3, 3], [3, 0, 0]]
        coords = np.unique(np.vstack([_coords(rng, int(rng.integers(4, 10)), span=4), corners]), axis=0)
        geom = SparseGeometry.build(coords, cfg.n_levels)
        feats = rng.uniform(0, 1, size=(len(coords), 5))
        labels = _labels(rng, len(coords), 3, 0.0)
        hh = ww = 6
        winners = np.full(hh * ww, -1)
        winners[rng.choice(hh * ww, len(coords), replace=False)] = np.arange(len(coords))
        batch = make_batch([feats], [geom], None if double_head else [winners], (hh, ww))
        pooled = 2
        bev_labels = [_labels(rng, pooled * pooled, 3, 0.25).reshape(pooled, pooled)]
        res = forward_batch(params, batch, cfg, training=True)
        if _relu_margin(res.tape) >= RELU_MARGIN:
            break

    def f():
        res = forward_batch(params, batch, cfg, training=True)
        return batch_loss(res, batch, [labels], bev_labels, 3, (0.5, 0.5)).total

    loss = batch_loss(res, batch, [labels], bev_labels, 3, (0.5, 0.5))
    grads = backward(res.tape, loss.grad3d, loss.grad_bev)
    names = list(params.weights)
    return f, [params.weights[n] for n in names], [grads.get(n, np.zeros_like(params.weights[n])) for n in names]


CASES = {
    "sparse_conv": case_sparse_conv,
    "strided_conv": case_strided_conv,
    "transposed_conv": case_transposed_conv,
    "batchnorm": case_batchnorm,
    "relu": case_relu,
    "linear": case_linear,
    "projection": case_projection,
    "maxpool": case_maxpool,
    "conv2d": case_conv2d,
    "dice_total": case_dice_total,
}


def check(case, rng, floor=ABS_FLOOR):
    f, arrays, analytic = case(rng)
    worst = 0.0
    for arr, g in zip(arrays, analytic):
        worst = max(worst, relative_error(g, central_difference(f, arr, H), floor))
    return worst


def check_sampled(case, rng, n_coords):
    """Like ``check`` but differentiates only ``n_coords`` entries drawn across all arrays."""
    f, arrays, analytic = case(rng)
    sizes = np.array([a.size for a in arrays])
    picks = rng.choice(sizes.sum(), size=min(n_coords, sizes.sum()), replace=False)
    owner = np.searchsorted(np.cumsum(sizes), picks, side="right")
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    a_vals, n_vals = [], []
    for j, p in zip(owner, picks):
        flat, i = arrays[j].reshape(-1), p - starts[j]
        old = flat[i]
        flat[i] = old + H
        fp = f()
        flat[i] = old - H
        fm = f()
        flat[i] = old
        n_vals.append((fp - fm) / (2 * H))
        a_vals.append(analytic[j].reshape(-1)[i])
    return relative_error(a_vals, n_vals, MODEL_ABS_FLOOR)


def model_case(rng):
    return tiny_model_case(rng)


def double_head_case(rng):
    return tiny_model_case(rng, double_head=True)


# composed network plus loss; every parameter is too slow, so sample coordinates
MODEL_CASES = {"model_lidog": model_case, "model_double_head": double_head_case}
MODEL_COORDS = 24
# the composed objective's O(h^2) truncation error is ~1e-9 at h = 1e-4, so entries
# below this magnitude are compared absolutely (tolerance REL_TOL * floor = 1e-9)
MODEL_ABS_FLOOR = 1e-5


def run_suite(n_instances=20, seed=0):
    """Worst relative error per layer (and per composed model) over ``n_instances`` instances each."""
    rng = np.random.default_rng(seed)
    worst = {name: max(check(case, rng) for _ in range(n_instances)) for name, case in CASES.items()}
    for name, case in MODEL_CASES.items():
        worst[name] = max(check_sampled(case, rng, MODEL_COORDS) for _ in range(n_instances))
    return worst
