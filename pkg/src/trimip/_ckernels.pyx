# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops: mipmap gather/scatter, segmented compositing, BVH casts.

Every routine here has a behaviourally identical twin in ``_pykernels``;
``trimip.kernels`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport floor, exp, fabs, INFINITY

cnp.import_array()


cdef inline Py_ssize_t _clampi(Py_ssize_t i, Py_ssize_t hi) nogil:
    if i < 0:
        return 0
    if i > hi:
        return hi
    return i


cdef inline double _clampf(double x, double lo, double hi) nogil:
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


def mip_gather(floating[:, ::1] data, const cnp.int64_t[::1] offsets,
               const cnp.int64_t[::1] heights, const cnp.int64_t[::1] widths,
               const double[::1] u, const double[::1] v, const double[::1] lvl,
               floating[:, ::1] out):
    cdef Py_ssize_t n_pts = u.shape[0]
    cdef Py_ssize_t C = data.shape[1]
    cdef Py_ssize_t n_lv = offsets.shape[0]
    cdef Py_ssize_t n, c, k, side, x0, x1, y0, y1, H, W, base
    cdef double l, wl, wk, px, py, fx, fy, uu, vv
    cdef double w00, w01, w10, w11
    cdef Py_ssize_t lk
    with nogil:
        for n in range(n_pts):
            for c in range(C):
                out[n, c] = 0
            l = _clampf(lvl[n], 0.0, <double>(n_lv - 1))
            k = <Py_ssize_t>floor(l)
            if k > n_lv - 1:
                k = n_lv - 1
            wl = l - k
            uu = _clampf(u[n], 0.0, 1.0)
            vv = _clampf(v[n], 0.0, 1.0)
            for side in range(2):
                if side == 0:
                    lk = k
                    wk = 1.0 - wl
                else:
                    lk = k + 1
                    wk = wl
                if wk == 0.0 or lk >= n_lv:
                    continue
                H = heights[lk]
                W = widths[lk]
                base = offsets[lk]
                px = uu * W - 0.5
                py = vv * H - 0.5
                x0 = <Py_ssize_t>floor(px)
                y0 = <Py_ssize_t>floor(py)
                fx = px - x0
                fy = py - y0
                x1 = _clampi(x0 + 1, W - 1)
                y1 = _clampi(y0 + 1, H - 1)
                x0 = _clampi(x0, W - 1)
                y0 = _clampi(y0, H - 1)
                w00 = wk * (1 - fx) * (1 - fy)
                w01 = wk * fx * (1 - fy)
                w10 = wk * (1 - fx) * fy
                w11 = wk * fx * fy
                for c in range(C):
                    out[n, c] += (w00 * data[base + y0 * W + x0, c]
                                  + w01 * data[base + y0 * W + x1, c]
                                  + w10 * data[base + y1 * W + x0, c]
                                  + w11 * data[base + y1 * W + x1, c])


def mip_scatter(floating[:, ::1] grad, const cnp.int64_t[::1] offsets,
                const cnp.int64_t[::1] heights, const cnp.int64_t[::1] widths,
                const double[::1] u, const double[::1] v, const double[::1] lvl,
                const floating[:, ::1] upstream):
    cdef Py_ssize_t n_pts = u.shape[0]
    cdef Py_ssize_t C = grad.shape[1]
    cdef Py_ssize_t n_lv = offsets.shape[0]
    cdef Py_ssize_t n, c, k, side, x0, x1, y0, y1, H, W, base
    cdef double l, wl, wk, px, py, fx, fy, uu, vv, g
    cdef double w00, w01, w10, w11
    cdef Py_ssize_t lk
    with nogil:
        for n in range(n_pts):
            l = _clampf(lvl[n], 0.0, <double>(n_lv - 1))
            k = <Py_ssize_t>floor(l)
            if k > n_lv - 1:
                k = n_lv - 1
            wl = l - k
            uu = _clampf(u[n], 0.0, 1.0)
            vv = _clampf(v[n], 0.0, 1.0)
            for side in range(2):
                if side == 0:
                    lk = k
                    wk = 1.0 - wl
                else:
                    lk = k + 1
                    wk = wl
                if wk == 0.0 or lk >= n_lv:
                    continue
                H = heights[lk]
                W = widths[lk]
                base = offsets[lk]
                px = uu * W - 0.5
                py = vv * H - 0.5
                x0 = <Py_ssize_t>floor(px)
                y0 = <Py_ssize_t>floor(py)
                fx = px - x0
                fy = py - y0
                x1 = _clampi(x0 + 1, W - 1)
                y1 = _clampi(y0 + 1, H - 1)
                x0 = _clampi(x0, W - 1)
                y0 = _clampi(y0, H - 1)
                w00 = wk * (1 - fx) * (1 - fy)
                w01 = wk * fx * (1 - fy)
                w10 = wk * (1 - fx) * fy
                w11 = wk * fx * fy
                for c in range(C):
                    g = upstream[n, c]
                    grad[base + y0 * W + x0, c] += w00 * g
                    grad[base + y0 * W + x1, c] += w01 * g
                    grad[base + y1 * W + x0, c] += w10 * g
                    grad[base + y1 * W + x1, c] += w11 * g


def composite_forward(const double[::1] tau, const double[:, ::1] rgb,
                      const double[::1] delta, const double[::1] t,
                      const cnp.int64_t[::1] offsets, const double[::1] bg,
                      double[:, ::1] out_rgb, double[::1] out_opacity,
                      double[::1] out_depth, double[::1] out_weights,
                      double[::1] out_trans):
    """Per-ray quadrature. ``out_trans`` receives the transmittance left after each ray."""
    cdef Py_ssize_t n_rays = offsets.shape[0] - 1
    cdef Py_ssize_t r, i
    cdef double T, a, w, acc, dep, cr, cg, cb
    with nogil:
        for r in range(n_rays):
            T = 1.0
            acc = 0.0
            dep = 0.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            for i in range(offsets[r], offsets[r + 1]):
                a = exp(-tau[i] * delta[i])
                w = T * (1.0 - a)
                out_weights[i] = w
                acc += w
                dep += w * t[i]
                cr += w * rgb[i, 0]
                cg += w * rgb[i, 1]
                cb += w * rgb[i, 2]
                T = T * a
            out_trans[r] = T
            out_opacity[r] = acc
            out_depth[r] = dep / acc if acc > 1e-10 else 0.0
            out_rgb[r, 0] = cr + (1.0 - acc) * bg[0]
            out_rgb[r, 1] = cg + (1.0 - acc) * bg[1]
            out_rgb[r, 2] = cb + (1.0 - acc) * bg[2]


def composite_backward(const double[::1] tau, const double[:, ::1] rgb,
                       const double[::1] delta, const cnp.int64_t[::1] offsets,
                       const double[::1] bg, const double[:, ::1] grad_out,
                       double[::1] grad_tau, double[:, ::1] grad_rgb):
    cdef Py_ssize_t n_rays = offsets.shape[0] - 1
    cdef Py_ssize_t r, i, s, e
    cdef double T, w, gc, acc
    cdef double[::1] trans = np.empty(tau.shape[0] + 1, dtype=np.float64)
    with nogil:
        for r in range(n_rays):
            s = offsets[r]
            e = offsets[r + 1]
            # trans[i] holds T before sample i; trans[e] the residual
            T = 1.0
            for i in range(s, e):
                trans[i] = T
                T = T * exp(-tau[i] * delta[i])
            acc = T * (grad_out[r, 0] * bg[0] + grad_out[r, 1] * bg[1]
                       + grad_out[r, 2] * bg[2])
            for i in range(e - 1, s - 1, -1):
                T = trans[i] * exp(-tau[i] * delta[i])
                w = trans[i] - T
                gc = (grad_out[r, 0] * rgb[i, 0] + grad_out[r, 1] * rgb[i, 1]
                      + grad_out[r, 2] * rgb[i, 2])
                grad_tau[i] = delta[i] * (T * gc - acc)
                grad_rgb[i, 0] = w * grad_out[r, 0]
                grad_rgb[i, 1] = w * grad_out[r, 1]
                grad_rgb[i, 2] = w * grad_out[r, 2]
                acc += w * gc


cdef inline bint _slab(const double[:, ::1] bmin, const double[:, ::1] bmax, Py_ssize_t node,
                       double ox, double oy, double oz, double ix, double iy, double iz,
                       double tmax, double* tnear) nogil:
    cdef double t0, t1, lo = 0.0, hi = tmax, tmp
    t0 = (bmin[node, 0] - ox) * ix
    t1 = (bmax[node, 0] - ox) * ix
    if t0 > t1:
        tmp = t0; t0 = t1; t1 = tmp
    if t0 > lo: lo = t0
    if t1 < hi: hi = t1
    t0 = (bmin[node, 1] - oy) * iy
    t1 = (bmax[node, 1] - oy) * iy
    if t0 > t1:
        tmp = t0; t0 = t1; t1 = tmp
    if t0 > lo: lo = t0
    if t1 < hi: hi = t1
    t0 = (bmin[node, 2] - oz) * iz
    t1 = (bmax[node, 2] - oz) * iz
    if t0 > t1:
        tmp = t0; t0 = t1; t1 = tmp
    if t0 > lo: lo = t0
    if t1 < hi: hi = t1
    tnear[0] = lo
    return lo <= hi


def bvh_closest_hit(const double[:, ::1] bmin, const double[:, ::1] bmax,
                    const cnp.int64_t[::1] left, const cnp.int64_t[::1] right,
                    const cnp.int64_t[::1] start, const cnp.int64_t[::1] count,
                    const double[:, :, ::1] tris,
                    const double[:, ::1] origins, const double[:, ::1] dirs,
                    double[::1] t_hit, cnp.int64_t[::1] tri_hit):
    """Nearest positive Moller-Trumbore hit; ``t_hit`` is inf on a miss."""
    cdef Py_ssize_t n_rays = origins.shape[0]
    cdef Py_ssize_t r, node, k, sp
    cdef cnp.int64_t stack[128]
    cdef double ox, oy, oz, dx, dy, dz, ix, iy, iz, best, tn
    cdef double e1x, e1y, e1z, e2x, e2y, e2z, px, py, pz, det, inv, sx, sy, sz
    cdef double qx, qy, qz, bu, bv, tt
    cdef cnp.int64_t best_tri
    with nogil:
        for r in range(n_rays):
            ox = origins[r, 0]; oy = origins[r, 1]; oz = origins[r, 2]
            dx = dirs[r, 0]; dy = dirs[r, 1]; dz = dirs[r, 2]
            ix = 1.0 / dx if dx != 0 else 1e300
            iy = 1.0 / dy if dy != 0 else 1e300
            iz = 1.0 / dz if dz != 0 else 1e300
            best = 1e300
            best_tri = -1
            sp = 0
            stack[sp] = 0
            sp += 1
            while sp > 0:
                sp -= 1
                node = stack[sp]
                if not _slab(bmin, bmax, node, ox, oy, oz, ix, iy, iz, best, &tn):
                    continue
                if count[node] > 0:
                    for k in range(start[node], start[node] + count[node]):
                        e1x = tris[k, 1, 0] - tris[k, 0, 0]
                        e1y = tris[k, 1, 1] - tris[k, 0, 1]
                        e1z = tris[k, 1, 2] - tris[k, 0, 2]
                        e2x = tris[k, 2, 0] - tris[k, 0, 0]
                        e2y = tris[k, 2, 1] - tris[k, 0, 1]
                        e2z = tris[k, 2, 2] - tris[k, 0, 2]
                        px = dy * e2z - dz * e2y
                        py = dz * e2x - dx * e2z
                        pz = dx * e2y - dy * e2x
                        det = e1x * px + e1y * py + e1z * pz
                        if fabs(det) < 1e-14:
                            continue
                        inv = 1.0 / det
                        sx = ox - tris[k, 0, 0]
                        sy = oy - tris[k, 0, 1]
                        sz = oz - tris[k, 0, 2]
                        bu = (sx * px + sy * py + sz * pz) * inv
                        if bu < 0.0 or bu > 1.0:
                            continue
                        qx = sy * e1z - sz * e1y
                        qy = sz * e1x - sx * e1z
                        qz = sx * e1y - sy * e1x
                        bv = (dx * qx + dy * qy + dz * qz) * inv
                        if bv < 0.0 or bu + bv > 1.0:
                            continue
                        tt = (e2x * qx + e2y * qy + e2z * qz) * inv
                        if tt > 1e-9 and (tt < best or (tt == best and k < best_tri)):
                            best = tt
                            best_tri = k
                else:
                    if sp + 2 <= 128:
                        stack[sp] = right[node]
                        stack[sp + 1] = left[node]
                        sp += 2
            t_hit[r] = best if best_tri >= 0 else INFINITY
            tri_hit[r] = best_tri
