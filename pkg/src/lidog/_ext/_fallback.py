"""Pure numpy versions of the compiled kernels.

Same signatures, same tie-breaking, same floating-point formulas as ``_kernels.pyx``.
"""

import numpy as np

T_EPS = 1e-9


def sparse_conv_forward(x, w, rb_in, rb_out, rb_ptr, n_out):
    out = np.zeros((n_out, w.shape[2]), dtype=np.float64)
    for k in range(w.shape[0]):
        lo, hi = rb_ptr[k], rb_ptr[k + 1]
        if hi > lo:
            # out rows are unique within one kernel offset
            out[rb_out[lo:hi]] += x[rb_in[lo:hi]] @ w[k]
    return out


def sparse_conv_backward(gy, x, w, rb_in, rb_out, rb_ptr):
    gx = np.zeros((x.shape[0], w.shape[1]), dtype=np.float64)
    gw = np.zeros_like(w)
    for k in range(w.shape[0]):
        lo, hi = rb_ptr[k], rb_ptr[k + 1]
        if hi > lo:
            g = gy[rb_out[lo:hi]]
            xi = x[rb_in[lo:hi]]
            gx[rb_in[lo:hi]] += g @ w[k].T
            gw[k] = xi.T @ g
    return gx, gw


def maxpool2d_forward(x, window, stride, pad):
    nb, h, wd, c = x.shape
    ho = (h + 2 * pad - window) // stride + 1
    wo = (wd + 2 * pad - window) // stride + 1
    best = np.full((nb, ho, wo, c), -np.inf)
    besti = np.full((nb, ho, wo, c), -1, dtype=np.int64)
    rows0 = np.arange(ho) * stride - pad
    cols0 = np.arange(wo) * stride - pad
    for dr in range(window):
        r = rows0 + dr
        rv = (r >= 0) & (r < h)
        rc = np.clip(r, 0, h - 1)
        for ds in range(window):
            s = cols0 + ds
            sv = (s >= 0) & (s < wd)
            sc = np.clip(s, 0, wd - 1)
            v = x[:, rc[:, None], sc[None, :], :]
            inb = (rv[:, None] & sv[None, :])[None, :, :, None]
            take = inb & ((besti < 0) | (v > best))
            best = np.where(take, v, best)
            besti = np.where(take, (rc[:, None] * wd + sc[None, :])[None, :, :, None], besti)
    return best, besti


def maxpool2d_backward(gy, arg, h, wd):
    nb, ho, wo, c = gy.shape
    gx = np.zeros((nb, h * wd, c))
    n_idx = np.broadcast_to(np.arange(nb)[:, None, None, None], arg.shape)
    c_idx = np.broadcast_to(np.arange(c)[None, None, None, :], arg.shape)
    np.add.at(gx, (n_idx.ravel(), arg.ravel(), c_idx.ravel()), gy.ravel())
    return gx.reshape(nb, h, wd, c)


def select_winners(pixel, priority, n_pixels):
    winner = np.full(n_pixels, -1, dtype=np.int64)
    idx = np.flatnonzero(pixel >= 0)
    if idx.size == 0:
        return winner
    order = np.lexsort((idx, -priority[idx], pixel[idx]))
    srt = idx[order]
    px = pixel[srt]
    first = np.ones(srt.size, dtype=bool)
    first[1:] = px[1:] != px[:-1]
    winner[px[first]] = srt[first]
    return winner


def _plane(oy, dy, h):
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (h - oy) / dy
    return np.where((dy != 0.0) & (t > T_EPS), t, np.inf)


def _box(o, d, p):
    n = d.shape[0]
    tnear = np.full(n, -np.inf)
    tfar = np.full(n, np.inf)
    miss = np.zeros(n, dtype=bool)
    for a in range(3):
        par = np.abs(d[:, a]) < 1e-15
        miss |= par & ((o[a] < p[a]) | (o[a] > p[a + 3]))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (p[a] - o[a]) / d[:, a]
            t2 = (p[a + 3] - o[a]) / d[:, a]
        lo = np.minimum(t1, t2)
        hi = np.maximum(t1, t2)
        tnear = np.where(~par & (lo > tnear), lo, tnear)
        tfar = np.where(~par & (hi < tfar), hi, tfar)
    t = np.where(tnear > T_EPS, tnear, np.where(tfar > T_EPS, tfar, np.inf))
    return np.where(miss | (tnear > tfar), np.inf, t)


def _cylinder(o, d, p):
    cx, cz, r, y0, y1 = p[0], p[1], p[2], p[3], p[4]
    px, pz = o[0] - cx, o[2] - cz
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    a = dx * dx + dz * dz
    b = 2.0 * (px * dx + pz * dz)
    c = px * px + pz * pz - r * r
    best = np.full(d.shape[0], np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - 4.0 * a * c
        side = (a > 0.0) & (disc >= 0.0)
        sq = np.sqrt(np.where(side, disc, 0.0))
        for sign in (-1.0, 1.0):
            t = (-b + sign * sq) / (2.0 * a)
            y = o[1] + t * dy
            ok = side & (t > T_EPS) & (y >= y0) & (y <= y1) & (t < best)
            best = np.where(ok, t, best)
        for cap in (y1, y0):
            t = (cap - o[1]) / dy
            hx = px + t * dx
            hz = pz + t * dz
            ok = (dy != 0.0) & (t > T_EPS) & (hx * hx + hz * hz <= r * r) & (t < best)
            best = np.where(ok, t, best)
    return best


def _sphere(o, d, p):
    px, py, pz, r = o[0] - p[0], o[1] - p[1], o[2] - p[2], p[3]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    a = dx * dx + dy * dy + dz * dz
    b = 2.0 * (px * dx + py * dy + pz * dz)
    c = px * px + py * py + pz * pz - r * r
    disc = b * b - 4.0 * a * c
    sq = np.sqrt(np.where(disc >= 0.0, disc, 0.0))
    t1 = (-b - sq) / (2.0 * a)
    t2 = (-b + sq) / (2.0 * a)
    t = np.where(t1 > T_EPS, t1, np.where(t2 > T_EPS, t2, np.inf))
    return np.where(disc >= 0.0, t, np.inf)


def raycast(origin, dirs, kinds, prm):
    n = dirs.shape[0]
    tbest = np.full(n, np.inf)
    hit = np.full(n, -1, dtype=np.int64)
    o = origin
    for j in range(kinds.shape[0]):
        kind = kinds[j]
        if kind == 0:
            t = _plane(o[1], dirs[:, 1], prm[j, 0])
        elif kind == 1:
            t = _box(o, dirs, prm[j])
        elif kind == 2:
            t = _cylinder(o, dirs, prm[j])
        else:
            t = _sphere(o, dirs, prm[j])
        closer = t < tbest
        tbest = np.where(closer, t, tbest)
        hit = np.where(closer, j, hit)
    return tbest, hit
