"""Slow, loop-based reference implementations used only by the tests.

Nothing here imports the package's kernels; each function is written from the
definition so that agreement with the vectorized code is meaningful.
"""

import math
from collections import Counter, defaultdict
from itertools import product

import numpy as np

IGNORE = -1


def project_index(x, z, b_x, b_z, width, height):
    """Shift by the bound, divide by the cell size, floor; reject outside [0, dim)."""
    xq = 2.0 * b_x / width
    zq = 2.0 * b_z / height
    if not (-b_x <= x < b_x and -b_z <= z < b_z):
        return None
    u = math.floor((x + b_x) / xq)
    v = math.floor((z + b_z) / zq)
    if 0 <= u < width and 0 <= v < height:
        return (u, v)
    return None


def majority(labels):
    votes = Counter(int(l) for l in labels if l != IGNORE)
    if not votes:
        return IGNORE
    best = max(votes.values())
    return min(c for c, n in votes.items() if n == best)


def voxel_cells(xyz, size):
    cells = defaultdict(list)
    for i, p in enumerate(xyz):
        cells[tuple(int(math.floor(c / size)) for c in p)].append(i)
    return dict(sorted(cells.items()))


def confusion(pred, gt, k):
    cm = [[0] * k for _ in range(k)]
    for p, g in zip(pred, gt):
        if g == IGNORE:
            continue
        cm[g][p] += 1
    return cm


def iou_from_points(pred, gt, c):
    inter = sum(1 for p, g in zip(pred, gt) if g != IGNORE and p == c and g == c)
    union = sum(1 for p, g in zip(pred, gt) if g != IGNORE and (p == c or g == c))
    return None if union == 0 else 100.0 * inter / union


def dice(probs, targets, k, eps=1e-7):
    present = sorted({int(t) for t in targets if t != IGNORE})
    if not present:
        return 0.0
    scores = []
    for c in present:
        inter = s_p = s_y = 0.0
        for row, t in zip(probs, targets):
            if t == IGNORE:
                continue
            y = 1.0 if t == c else 0.0
            inter += row[c] * y
            s_p += row[c]
            s_y += y
        scores.append(2.0 * inter / (s_p + s_y + eps))
    return 1.0 - sum(scores) / len(scores)


def maxpool(x, window, stride, pad):
    """x[H, W] -> pooled, padding never wins, first index wins ties."""
    h, w = x.shape
    oh = (h + 2 * pad - window) // stride + 1
    ow = (w + 2 * pad - window) // stride + 1
    out = np.zeros((oh, ow))
    for i in range(oh):
        for j in range(ow):
            best = None
            for r in range(i * stride - pad, i * stride - pad + window):
                for s in range(j * stride - pad, j * stride - pad + window):
                    if 0 <= r < h and 0 <= s < w and (best is None or x[r, s] > best):
                        best = x[r, s]
            out[i, j] = best
    return out


def submanifold_conv(coords, x, w):
    """coords (N,3) ints, x (N,Cin), w (27,Cin,Cout) indexed by product((-1,0,1), repeat=3)."""
    where = {tuple(c): i for i, c in enumerate(coords)}
    offsets = list(product((-1, 0, 1), repeat=3))
    y = np.zeros((len(coords), w.shape[2]))
    for i, c in enumerate(coords):
        for k, o in enumerate(offsets):
            j = where.get((c[0] + o[0], c[1] + o[1], c[2] + o[2]))
            if j is not None:
                y[i] += x[j] @ w[k]
    return y


def strided_conv(fine, x, w):
    """Stride-2 conv: output cells are unique floor(c/2); input cell = 2q + offset."""
    coarse = sorted({tuple(int(v) // 2 for v in c) for c in fine})
    where = {tuple(c): i for i, c in enumerate(fine)}
    offsets = list(product((-1, 0, 1), repeat=3))
    y = np.zeros((len(coarse), w.shape[2]))
    for i, q in enumerate(coarse):
        for k, o in enumerate(offsets):
            j = where.get((2 * q[0] + o[0], 2 * q[1] + o[1], 2 * q[2] + o[2]))
            if j is not None:
                y[i] += x[j] @ w[k]
    return np.array(coarse), y


def conv2d_same(x, w, b):
    """x[H,W,Cin], w[3,3,Cin,Cout], zero padding 1."""
    h, wd, _ = x.shape
    out = np.zeros((h, wd, w.shape[3])) + b
    for i in range(h):
        for j in range(wd):
            for di in range(3):
                for dj in range(3):
                    r, s = i + di - 1, j + dj - 1
                    if 0 <= r < h and 0 <= s < wd:
                        out[i, j] += x[r, s] @ w[di, dj]
    return out


def plane_hit(height, origin, direction):
    if direction[1] == 0:
        return None
    t = (height - origin[1]) / direction[1]
    return t if t > 0 else None


def central_difference(f, x, h=1e-4):
    """Numerical gradient of scalar f at array x (modified in place, restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g
