"""NumPy implementations of the compiled kernels.

Signatures and in-place output conventions mirror ``_ckernels`` exactly so the
two can be swapped freely. These are vectorised rather than looped, but they
are still several times slower than the extension for large batches.
"""

import numpy as np


def _taps(offsets, heights, widths, u, v, lvl):
    """Flat texel indices (N, 8) and weights (N, 8) for a trilinear lookup."""
    n_lv = offsets.shape[0]
    l = np.clip(lvl, 0.0, n_lv - 1)
    k = np.minimum(np.floor(l).astype(np.int64), n_lv - 1)
    wl = l - k
    uu = np.clip(u, 0.0, 1.0)
    vv = np.clip(v, 0.0, 1.0)
    idx = []
    wts = []
    for lk, wk in ((k, 1.0 - wl), (k + 1, wl)):
        valid = lk < n_lv
        lk = np.minimum(lk, n_lv - 1)
        wk = np.where(valid, wk, 0.0)
        H = heights[lk]
        W = widths[lk]
        base = offsets[lk]
        px = uu * W - 0.5
        py = vv * H - 0.5
        x0 = np.floor(px).astype(np.int64)
        y0 = np.floor(py).astype(np.int64)
        fx = px - x0
        fy = py - y0
        x1 = np.clip(x0 + 1, 0, W - 1)
        y1 = np.clip(y0 + 1, 0, H - 1)
        x0 = np.clip(x0, 0, W - 1)
        y0 = np.clip(y0, 0, H - 1)
        idx += [base + y0 * W + x0, base + y0 * W + x1, base + y1 * W + x0, base + y1 * W + x1]
        wts += [wk * (1 - fx) * (1 - fy), wk * fx * (1 - fy), wk * (1 - fx) * fy, wk * fx * fy]
    return np.stack(idx, axis=1), np.stack(wts, axis=1)


def mip_gather(data, offsets, heights, widths, u, v, lvl, out):
    idx, wts = _taps(offsets, heights, widths, u, v, lvl)
    acc = np.einsum("nk,nkc->nc", wts, data[idx].astype(np.float64))
    out[...] = acc


def mip_scatter(grad, offsets, heights, widths, u, v, lvl, upstream):
    idx, wts = _taps(offsets, heights, widths, u, v, lvl)
    contrib = wts[:, :, None] * upstream[:, None, :].astype(np.float64)
    flat = idx.ravel()
    C = grad.shape[1]
    contrib = contrib.reshape(-1, C)
    for c in range(C):
        grad[:, c] += np.bincount(flat, weights=contrib[:, c], minlength=grad.shape[0])


def _pad(offsets, *arrays):
    """Scatter packed per-sample arrays into a (rays, max_len) padded layout."""
    counts = np.diff(offsets)
    n_rays = counts.shape[0]
    width = int(counts.max()) if n_rays else 0
    ray = np.repeat(np.arange(n_rays), counts)
    col = np.arange(offsets[-1]) - np.repeat(offsets[:-1], counts)
    out = []
    for a in arrays:
        p = np.zeros((n_rays, width) + a.shape[1:], dtype=np.float64)
        p[ray, col] = a
        out.append(p)
    return ray, col, out


def composite_forward(tau, rgb, delta, t, offsets, bg, out_rgb, out_opacity,
                      out_depth, out_weights, out_trans):
    ray, col, (x, c, tt) = _pad(offsets, tau * delta, rgb, t)
    excl = np.cumsum(x, axis=1) - x
    w = np.exp(-excl) * (1.0 - np.exp(-x))
    acc = w.sum(axis=1)
    out_weights[...] = w[ray, col]
    out_trans[...] = np.exp(-x.sum(axis=1))
    out_opacity[...] = acc
    dep = (w * tt).sum(axis=1)
    out_depth[...] = np.where(acc > 1e-10, dep / np.where(acc > 1e-10, acc, 1.0), 0.0)
    out_rgb[...] = (w[:, :, None] * c).sum(axis=1) + (1.0 - acc)[:, None] * bg[None, :]


def composite_backward(tau, rgb, delta, offsets, bg, grad_out, grad_tau, grad_rgb):
    ray, col, (x, c, d) = _pad(offsets, tau * delta, rgb, delta)
    incl = np.cumsum(x, axis=1)
    t_before = np.exp(-(incl - x))
    t_after = np.exp(-incl)
    w = t_before - t_after
    gc = np.einsum("rkc,rc->rk", c, grad_out)
    tail = t_after[:, -1:] * (grad_out @ bg)[:, None] if x.shape[1] else np.zeros((x.shape[0], 1))
    wg = w * gc
    # sum over j > i of w_j * gc_j
    after = np.cumsum(wg[:, ::-1], axis=1)[:, ::-1] - wg
    g_tau = d * (t_after * gc - (after + tail))
    grad_tau[...] = g_tau[ray, col]
    grad_rgb[...] = w[ray, col][:, None] * grad_out[ray]


def bvh_closest_hit(bmin, bmax, left, right, start, count, tris, origins, dirs, t_hit, tri_hit):
    n_rays = origins.shape[0]
    with np.errstate(divide="ignore"):
        inv = np.where(dirs != 0, 1.0 / np.where(dirs != 0, dirs, 1.0), 1e300)
    best = np.full(n_rays, np.inf)
    best_tri = np.full(n_rays, -1, dtype=np.int64)
    # breadth-first frontier of (ray, node) pairs
    f_ray = np.arange(n_rays)
    f_node = np.zeros(n_rays, dtype=np.int64)
    while f_ray.size:
        o = origins[f_ray]
        iv = inv[f_ray]
        t0 = (bmin[f_node] - o) * iv
        t1 = (bmax[f_node] - o) * iv
        lo = np.maximum(np.minimum(t0, t1).max(axis=1), 0.0)
        hi = np.minimum(np.maximum(t0, t1).min(axis=1), best[f_ray])
        keep = lo <= hi
        f_ray, f_node = f_ray[keep], f_node[keep]
        leaf = count[f_node] > 0
        l_ray, l_node = f_ray[leaf], f_node[leaf]
        if l_ray.size:
            n_t = count[l_node]
            p_ray = np.repeat(l_ray, n_t)
            p_tri = np.repeat(start[l_node], n_t) + (
                np.arange(n_t.sum()) - np.repeat(np.cumsum(n_t) - n_t, n_t))
            tt = _moller_trumbore(origins[p_ray], dirs[p_ray], tris[p_tri])
            hit = np.isfinite(tt)
            p_ray, p_tri, tt = p_ray[hit], p_tri[hit], tt[hit]
            # nearest first, lowest triangle index on ties
            order = np.lexsort((p_tri, tt, p_ray))
            p_ray, p_tri, tt = p_ray[order], p_tri[order], tt[order]
            first = np.ones(p_ray.size, dtype=bool)
            first[1:] = p_ray[1:] != p_ray[:-1]
            p_ray, p_tri, tt = p_ray[first], p_tri[first], tt[first]
            better = (tt < best[p_ray]) | ((tt == best[p_ray]) & (p_tri < best_tri[p_ray]))
            best[p_ray[better]] = tt[better]
            best_tri[p_ray[better]] = p_tri[better]
        inner = ~leaf
        f_ray = np.repeat(f_ray[inner], 2)
        f_node = np.stack([left[f_node[inner]], right[f_node[inner]]], axis=1).ravel()
    t_hit[...] = best
    tri_hit[...] = best_tri


def _moller_trumbore(o, d, tri):
    e1 = tri[:, 1] - tri[:, 0]
    e2 = tri[:, 2] - tri[:, 0]
    p = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, p)
    ok = np.abs(det) >= 1e-14
    inv = 1.0 / np.where(ok, det, 1.0)
    s = o - tri[:, 0]
    bu = np.einsum("ij,ij->i", s, p) * inv
    q = np.cross(s, e1)
    bv = np.einsum("ij,ij->i", d, q) * inv
    t = np.einsum("ij,ij->i", e2, q) * inv
    ok &= (bu >= 0) & (bu <= 1) & (bv >= 0) & (bu + bv <= 1) & (t > 1e-9)
    return np.where(ok, t, np.inf)
