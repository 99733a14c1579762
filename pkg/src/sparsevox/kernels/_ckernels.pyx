# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels. Same signatures and summation order as ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor, INFINITY

cnp.import_array()

NAME = "cython"


cdef inline void _sample_one(const double[:, :, ::1] f, double u, double v,
                             double* out, Py_ssize_t C) noexcept nogil:
    cdef Py_ssize_t H = f.shape[0], W = f.shape[1], c, k
    cdef double fx = floor(u), fy = floor(v)
    cdef double ax = u - fx, ay = v - fy
    cdef Py_ssize_t x0, y0
    cdef Py_ssize_t xs[4]
    cdef Py_ssize_t ys[4]
    cdef double ws[4]
    for c in range(C):
        out[c] = 0.0
    # far outside (or NaN): every corner is padding; also keeps the casts defined
    if not (fx > -2.0 and fx < W + 1.0 and fy > -2.0 and fy < H + 1.0):
        return
    x0 = <Py_ssize_t>fx
    y0 = <Py_ssize_t>fy
    xs[0] = x0; ys[0] = y0; ws[0] = (1 - ay) * (1 - ax)
    xs[1] = x0 + 1; ys[1] = y0; ws[1] = (1 - ay) * ax
    xs[2] = x0; ys[2] = y0 + 1; ws[2] = ay * (1 - ax)
    xs[3] = x0 + 1; ys[3] = y0 + 1; ws[3] = ay * ax
    for k in range(4):
        if xs[k] < 0 or xs[k] >= W or ys[k] < 0 or ys[k] >= H:
            continue
        for c in range(C):
            out[c] = out[c] + ws[k] * f[ys[k], xs[k], c]


cdef inline void _sample_back(const double[:, :, ::1] f, double[:, :, ::1] gf,
                              double u, double v, const double* g, double scale,
                              double* gu, double* gv, Py_ssize_t C) noexcept nogil:
    # accumulates scale * g into gf; writes d<sample, g>/du, /dv
    cdef Py_ssize_t H = f.shape[0], W = f.shape[1], c, k
    cdef double fx = floor(u), fy = floor(v)
    cdef double ax = u - fx, ay = v - fy
    cdef Py_ssize_t x0, y0
    cdef Py_ssize_t xs[4]
    cdef Py_ssize_t ys[4]
    cdef double ws[4]
    cdef double du[4]
    cdef double dv[4]
    cdef double dot
    gu[0] = 0.0
    gv[0] = 0.0
    if not (fx > -2.0 and fx < W + 1.0 and fy > -2.0 and fy < H + 1.0):
        return
    x0 = <Py_ssize_t>fx
    y0 = <Py_ssize_t>fy
    xs[0] = x0; ys[0] = y0; ws[0] = (1 - ay) * (1 - ax); du[0] = -(1 - ay); dv[0] = -(1 - ax)
    xs[1] = x0 + 1; ys[1] = y0; ws[1] = (1 - ay) * ax; du[1] = (1 - ay); dv[1] = -ax
    xs[2] = x0; ys[2] = y0 + 1; ws[2] = ay * (1 - ax); du[2] = -ay; dv[2] = (1 - ax)
    xs[3] = x0 + 1; ys[3] = y0 + 1; ws[3] = ay * ax; du[3] = ay; dv[3] = ax
    for k in range(4):
        if xs[k] < 0 or xs[k] >= W or ys[k] < 0 or ys[k] >= H:
            continue
        dot = 0.0
        for c in range(C):
            gf[ys[k], xs[k], c] += scale * ws[k] * g[c]
            dot = dot + f[ys[k], xs[k], c] * g[c]
        gu[0] += du[k] * dot
        gv[0] += dv[k] * dot


def bilinear_sample(fmap, u, v):
    cdef const double[:, :, ::1] f = np.ascontiguousarray(fmap, dtype=np.float64)
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64).ravel()
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64).ravel()
    cdef Py_ssize_t N = uu.shape[0], C = f.shape[2], n
    out_arr = np.zeros((N, C))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for n in range(N):
            _sample_one(f, uu[n], vv[n], &out[n, 0], C)
    return out_arr


def bilinear_backward(fmap, u, v, grad_out):
    cdef const double[:, :, ::1] f = np.ascontiguousarray(fmap, dtype=np.float64)
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64).ravel()
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64).ravel()
    cdef const double[:, ::1] g = np.ascontiguousarray(grad_out, dtype=np.float64)
    cdef Py_ssize_t N = uu.shape[0], C = f.shape[2], n
    gm_arr = np.zeros_like(np.asarray(f))
    gu_arr = np.zeros(N)
    gv_arr = np.zeros(N)
    cdef double[:, :, ::1] gm = gm_arr
    cdef double[::1] gu = gu_arr
    cdef double[::1] gv = gv_arr
    with nogil:
        for n in range(N):
            _sample_back(f, gm, uu[n], vv[n], &g[n, 0], 1.0, &gu[n], &gv[n], C)
    return gm_arr, gu_arr, gv_arr


def deform_aggregate(fmap, u, v, offsets, att):
    cdef const double[:, :, ::1] f = np.ascontiguousarray(fmap, dtype=np.float64)
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64).ravel()
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64).ravel()
    cdef const double[:, :, :, ::1] off = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef const double[:, :, ::1] a = np.ascontiguousarray(att, dtype=np.float64)
    cdef Py_ssize_t N = off.shape[0], Hh = off.shape[1], S = off.shape[2], C = f.shape[2]
    cdef Py_ssize_t n, h, s, c
    G_arr = np.zeros((N, Hh, C))
    tmp_arr = np.zeros(C)
    cdef double[:, :, ::1] G = G_arr
    cdef double[::1] tmp = tmp_arr
    with nogil:
        for n in range(N):
            for s in range(S):
                for h in range(Hh):
                    _sample_one(f, uu[n] + off[n, h, s, 0], vv[n] + off[n, h, s, 1], &tmp[0], C)
                    for c in range(C):
                        G[n, h, c] = G[n, h, c] + a[n, h, s] * tmp[c]
    return G_arr


def deform_aggregate_backward(fmap, u, v, offsets, att, grad_G):
    cdef const double[:, :, ::1] f = np.ascontiguousarray(fmap, dtype=np.float64)
    cdef const double[::1] uu = np.ascontiguousarray(u, dtype=np.float64).ravel()
    cdef const double[::1] vv = np.ascontiguousarray(v, dtype=np.float64).ravel()
    cdef const double[:, :, :, ::1] off = np.ascontiguousarray(offsets, dtype=np.float64)
    cdef const double[:, :, ::1] a = np.ascontiguousarray(att, dtype=np.float64)
    cdef const double[:, :, ::1] gG = np.ascontiguousarray(grad_G, dtype=np.float64)
    cdef Py_ssize_t N = off.shape[0], Hh = off.shape[1], S = off.shape[2], C = f.shape[2]
    cdef Py_ssize_t n, h, s, c
    cdef double pu, pv, dot
    gm_arr = np.zeros_like(np.asarray(f))
    goff_arr = np.zeros((N, Hh, S, 2))
    gatt_arr = np.zeros((N, Hh, S))
    tmp_arr = np.zeros(C)
    cdef double[:, :, ::1] gm = gm_arr
    cdef double[:, :, :, ::1] goff = goff_arr
    cdef double[:, :, ::1] gatt = gatt_arr
    cdef double[::1] tmp = tmp_arr
    with nogil:
        for n in range(N):
            for h in range(Hh):
                for s in range(S):
                    pu = uu[n] + off[n, h, s, 0]
                    pv = vv[n] + off[n, h, s, 1]
                    _sample_one(f, pu, pv, &tmp[0], C)
                    dot = 0.0
                    for c in range(C):
                        dot = dot + tmp[c] * gG[n, h, c]
                    gatt[n, h, s] = dot
                    _sample_back(f, gm, pu, pv, &gG[n, h, 0], a[n, h, s],
                                 &goff[n, h, s, 0], &goff[n, h, s, 1], C)
                    goff[n, h, s, 0] *= a[n, h, s]
                    goff[n, h, s, 1] *= a[n, h, s]
    return gm_arr, goff_arr, gatt_arr


def linear_rows(X, Wt, b):
    cdef const double[:, ::1] x = np.ascontiguousarray(X, dtype=np.float64)
    cdef const double[:, ::1] w = np.ascontiguousarray(Wt, dtype=np.float64)
    cdef const double[::1] bb = np.ascontiguousarray(b, dtype=np.float64)
    cdef Py_ssize_t N = x.shape[0], Din = x.shape[1], Dout = w.shape[1], n, i, j
    out_arr = np.zeros((N, Dout))
    cdef double[:, ::1] out = out_arr
    cdef double xi
    with nogil:
        for n in range(N):
            for i in range(Din):
                xi = x[n, i]
                for j in range(Dout):
                    out[n, j] = out[n, j] + xi * w[i, j]
            for j in range(Dout):
                out[n, j] = out[n, j] + bb[j]
    return out_arr


def raycast(occ, origin, double voxel_size, ray_o, dirs):
    cdef const cnp.uint8_t[::1] o = np.ascontiguousarray(occ, dtype=np.uint8).ravel()
    cdef Py_ssize_t X = occ.shape[0], Y = occ.shape[1], Z = occ.shape[2]
    cdef const double[::1] lo = np.ascontiguousarray(origin, dtype=np.float64)
    cdef const double[::1] ro = np.ascontiguousarray(ray_o, dtype=np.float64)
    cdef const double[:, ::1] d = np.ascontiguousarray(dirs, dtype=np.float64)
    cdef Py_ssize_t n = d.shape[0], r, a, amin
    hit_arr = np.full(n, -1, dtype=np.int64)
    t_arr = np.full(n, np.inf)
    cdef cnp.int64_t[::1] hit = hit_arr
    cdef double[::1] th = t_arr
    cdef double hi[3]
    cdef Py_ssize_t dims[3]
    cdef Py_ssize_t idx[3]
    cdef Py_ssize_t step[3]
    cdef double tmax[3]
    cdef double tdel[3]
    cdef double t0, t1, ta, tb, tt, t, p
    cdef Py_ssize_t flat
    cdef bint miss
    dims[0] = X; dims[1] = Y; dims[2] = Z
    for a in range(3):
        hi[a] = lo[a] + dims[a] * voxel_size
    with nogil:
        for r in range(n):
            t0 = 0.0
            t1 = INFINITY
            miss = False
            for a in range(3):
                if -1e-15 < d[r, a] < 1e-15:
                    if ro[a] < lo[a] or ro[a] >= hi[a]:
                        miss = True
                    continue
                ta = (lo[a] - ro[a]) / d[r, a]
                tb = (hi[a] - ro[a]) / d[r, a]
                if ta > tb:
                    tt = ta; ta = tb; tb = tt
                if ta > t0:
                    t0 = ta
                if tb < t1:
                    t1 = tb
            if miss or t0 > t1:
                continue
            for a in range(3):
                p = ro[a] + t0 * d[r, a]
                idx[a] = <Py_ssize_t>floor((p - lo[a]) / voxel_size)
                if idx[a] < 0:
                    idx[a] = 0
                if idx[a] > dims[a] - 1:
                    idx[a] = dims[a] - 1
                step[a] = 0
                tmax[a] = INFINITY
                tdel[a] = INFINITY
                if d[r, a] > 1e-15:
                    step[a] = 1
                    tmax[a] = (lo[a] + (idx[a] + 1) * voxel_size - ro[a]) / d[r, a]
                    tdel[a] = voxel_size / d[r, a]
                elif d[r, a] < -1e-15:
                    step[a] = -1
                    tmax[a] = (lo[a] + idx[a] * voxel_size - ro[a]) / d[r, a]
                    tdel[a] = -voxel_size / d[r, a]
            t = t0
            while True:
                flat = (idx[0] * Y + idx[1]) * Z + idx[2]
                if o[flat]:
                    hit[r] = flat
                    th[r] = t
                    break
                amin = 0
                if tmax[1] < tmax[amin]:
                    amin = 1
                if tmax[2] < tmax[amin]:
                    amin = 2
                t = tmax[amin]
                if t > t1:
                    break
                idx[amin] += step[amin]
                if idx[amin] < 0 or idx[amin] >= dims[amin]:
                    break
                tmax[amin] += tdel[amin]
    return hit_arr, t_arr
