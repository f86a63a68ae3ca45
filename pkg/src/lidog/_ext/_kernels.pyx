# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Mirrors ``_fallback`` function for function."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, INFINITY, fabs

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64

cdef double T_EPS = 1e-9


def sparse_conv_forward(const f64[:, ::1] x, const f64[:, :, ::1] w, const i64[::1] rb_in,
                        const i64[::1] rb_out, const i64[::1] rb_ptr, Py_ssize_t n_out):
    cdef Py_ssize_t n_k = w.shape[0], cin = w.shape[1], cout = w.shape[2]
    out_arr = np.zeros((n_out, cout), dtype=np.float64)
    cdef f64[:, ::1] out = out_arr
    cdef Py_ssize_t k, p, a, b, i, o
    cdef double xv
    with nogil:
        for k in range(n_k):
            for p in range(rb_ptr[k], rb_ptr[k + 1]):
                i = rb_in[p]
                o = rb_out[p]
                for a in range(cin):
                    xv = x[i, a]
                    if xv == 0.0:
                        continue
                    for b in range(cout):
                        out[o, b] += xv * w[k, a, b]
    return out_arr


def sparse_conv_backward(const f64[:, ::1] gy, const f64[:, ::1] x, const f64[:, :, ::1] w,
                         const i64[::1] rb_in, const i64[::1] rb_out, const i64[::1] rb_ptr):
    cdef Py_ssize_t n_k = w.shape[0], cin = w.shape[1], cout = w.shape[2]
    gx_arr = np.zeros((x.shape[0], cin), dtype=np.float64)
    gw_arr = np.zeros((n_k, cin, cout), dtype=np.float64)
    cdef f64[:, ::1] gx = gx_arr
    cdef f64[:, :, ::1] gw = gw_arr
    cdef Py_ssize_t k, p, a, b, i, o
    cdef double acc, xv
    with nogil:
        for k in range(n_k):
            for p in range(rb_ptr[k], rb_ptr[k + 1]):
                i = rb_in[p]
                o = rb_out[p]
                for a in range(cin):
                    acc = 0.0
                    xv = x[i, a]
                    for b in range(cout):
                        acc = acc + gy[o, b] * w[k, a, b]
                        gw[k, a, b] += xv * gy[o, b]
                    gx[i, a] += acc
    return gx_arr, gw_arr


def maxpool2d_forward(const f64[:, :, :, ::1] x, int window, int stride, int pad):
    cdef Py_ssize_t nb = x.shape[0], h = x.shape[1], wd = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - window) // stride + 1
    cdef Py_ssize_t wo = (wd + 2 * pad - window) // stride + 1
    y_arr = np.empty((nb, ho, wo, c), dtype=np.float64)
    arg_arr = np.empty((nb, ho, wo, c), dtype=np.int64)
    cdef f64[:, :, :, ::1] y = y_arr
    cdef i64[:, :, :, ::1] arg = arg_arr
    cdef Py_ssize_t n, oi, oj, ch, r, s, r0, s0
    cdef double best, v
    cdef i64 besti
    with nogil:
        for n in range(nb):
            for oi in range(ho):
                r0 = oi * stride - pad
                for oj in range(wo):
                    s0 = oj * stride - pad
                    for ch in range(c):
                        best = -INFINITY
                        besti = -1
                        for r in range(r0, r0 + window):
                            if r < 0 or r >= h:
                                continue
                            for s in range(s0, s0 + window):
                                if s < 0 or s >= wd:
                                    continue
                                v = x[n, r, s, ch]
                                if besti < 0 or v > best:
                                    best = v
                                    besti = r * wd + s
                        y[n, oi, oj, ch] = best
                        arg[n, oi, oj, ch] = besti
    return y_arr, arg_arr


def maxpool2d_backward(const f64[:, :, :, ::1] gy, const i64[:, :, :, ::1] arg, Py_ssize_t h, Py_ssize_t wd):
    cdef Py_ssize_t nb = gy.shape[0], ho = gy.shape[1], wo = gy.shape[2], c = gy.shape[3]
    gx_arr = np.zeros((nb, h, wd, c), dtype=np.float64)
    cdef f64[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t n, oi, oj, ch
    cdef i64 a
    with nogil:
        for n in range(nb):
            for oi in range(ho):
                for oj in range(wo):
                    for ch in range(c):
                        a = arg[n, oi, oj, ch]
                        gx[n, a // wd, a % wd, ch] += gy[n, oi, oj, ch]
    return gx_arr


def select_winners(const i64[::1] pixel, const f64[::1] priority, Py_ssize_t n_pixels):
    winner_arr = np.full(n_pixels, -1, dtype=np.int64)
    cdef i64[::1] winner = winner_arr
    cdef Py_ssize_t i, n = pixel.shape[0]
    cdef i64 px, cur
    with nogil:
        for i in range(n):
            px = pixel[i]
            if px < 0:
                continue
            cur = winner[px]
            if cur < 0 or priority[i] > priority[cur]:
                winner[px] = i
    return winner_arr


cdef inline double _plane(double oy, double dy, double h) nogil:
    cdef double t
    if dy == 0.0:
        return INFINITY
    t = (h - oy) / dy
    if t > T_EPS:
        return t
    return INFINITY


cdef inline double _box(double ox, double oy, double oz, double dx, double dy, double dz,
                        const f64[:, ::1] prm, Py_ssize_t j) nogil:
    cdef double tnear = -INFINITY, tfar = INFINITY, t1, t2, tmp
    cdef double o[3]
    cdef double d[3]
    cdef int a
    o[0] = ox; o[1] = oy; o[2] = oz
    d[0] = dx; d[1] = dy; d[2] = dz
    for a in range(3):
        if fabs(d[a]) < 1e-15:
            if o[a] < prm[j, a] or o[a] > prm[j, a + 3]:
                return INFINITY
            continue
        t1 = (prm[j, a] - o[a]) / d[a]
        t2 = (prm[j, a + 3] - o[a]) / d[a]
        if t1 > t2:
            tmp = t1; t1 = t2; t2 = tmp
        if t1 > tnear:
            tnear = t1
        if t2 < tfar:
            tfar = t2
    if tnear > tfar:
        return INFINITY
    if tnear > T_EPS:
        return tnear
    if tfar > T_EPS:
        return tfar
    return INFINITY


cdef inline double _cylinder(double ox, double oy, double oz, double dx, double dy, double dz,
                             const f64[:, ::1] prm, Py_ssize_t j) nogil:
    cdef double cx = prm[j, 0], cz = prm[j, 1], r = prm[j, 2], y0 = prm[j, 3], y1 = prm[j, 4]
    cdef double px = ox - cx, pz = oz - cz
    cdef double a = dx * dx + dz * dz
    cdef double b = 2.0 * (px * dx + pz * dz)
    cdef double c = px * px + pz * pz - r * r
    cdef double best = INFINITY, disc, sq, t, y, hx, hz
    if a > 0.0:
        disc = b * b - 4.0 * a * c
        if disc >= 0.0:
            sq = sqrt(disc)
            t = (-b - sq) / (2.0 * a)
            y = oy + t * dy
            if t > T_EPS and y >= y0 and y <= y1 and t < best:
                best = t
            t = (-b + sq) / (2.0 * a)
            y = oy + t * dy
            if t > T_EPS and y >= y0 and y <= y1 and t < best:
                best = t
    if dy != 0.0:
        t = (y1 - oy) / dy
        hx = px + t * dx
        hz = pz + t * dz
        if t > T_EPS and hx * hx + hz * hz <= r * r and t < best:
            best = t
        t = (y0 - oy) / dy
        hx = px + t * dx
        hz = pz + t * dz
        if t > T_EPS and hx * hx + hz * hz <= r * r and t < best:
            best = t
    return best


cdef inline double _sphere(double ox, double oy, double oz, double dx, double dy, double dz,
                           const f64[:, ::1] prm, Py_ssize_t j) nogil:
    cdef double px = ox - prm[j, 0], py = oy - prm[j, 1], pz = oz - prm[j, 2], r = prm[j, 3]
    cdef double a = dx * dx + dy * dy + dz * dz
    cdef double b = 2.0 * (px * dx + py * dy + pz * dz)
    cdef double c = px * px + py * py + pz * pz - r * r
    cdef double disc = b * b - 4.0 * a * c, sq, t
    if disc < 0.0:
        return INFINITY
    sq = sqrt(disc)
    t = (-b - sq) / (2.0 * a)
    if t > T_EPS:
        return t
    t = (-b + sq) / (2.0 * a)
    if t > T_EPS:
        return t
    return INFINITY


def raycast(const f64[::1] origin, const f64[:, ::1] dirs, const i64[::1] kinds, const f64[:, ::1] prm):
    cdef Py_ssize_t nr = dirs.shape[0], npr = kinds.shape[0], i, j
    t_arr = np.full(nr, np.inf, dtype=np.float64)
    hit_arr = np.full(nr, -1, dtype=np.int64)
    cdef f64[::1] tbest = t_arr
    cdef i64[::1] hit = hit_arr
    cdef double ox = origin[0], oy = origin[1], oz = origin[2], dx, dy, dz, t
    with nogil:
        for i in range(nr):
            dx = dirs[i, 0]; dy = dirs[i, 1]; dz = dirs[i, 2]
            for j in range(npr):
                if kinds[j] == 0:
                    t = _plane(oy, dy, prm[j, 0])
                elif kinds[j] == 1:
                    t = _box(ox, oy, oz, dx, dy, dz, prm, j)
                elif kinds[j] == 2:
                    t = _cylinder(ox, oy, oz, dx, dy, dz, prm, j)
                else:
                    t = _sphere(ox, oy, oz, dx, dy, dz, prm, j)
                if t < tbest[i]:
                    tbest[i] = t
                    hit[i] = j
    return t_arr, hit_arr
