"""Independent reference implementations used to check the library.

Nothing here calls into the code under test except for plain data types, so a
bug in the library cannot be mirrored by the oracle.
"""

import math

import numpy as np
from scipy.optimize import minimize_scalar


# --- cones -----------------------------------------------------------------

def generatrix_distance(origin, d_world, rot, disc_radius, point, n=4096):
    """Distance from ``point`` to the oblique cone through the pixel disc rim.

    The rim lies in the image plane (z = 1 in camera units) around the pixel
    centre; each rim point defines a generatrix ray from the apex. The minimum
    over ``n`` sampled generatrices is refined with a bounded scalar search.
    """
    origin = np.asarray(origin, dtype=np.float64)
    d_cam = rot.T @ np.asarray(d_world, dtype=np.float64)
    x = np.asarray(point, dtype=np.float64) - origin

    def dist(theta):
        q = d_cam + disc_radius * np.array([np.cos(theta), np.sin(theta), 0.0])
        u = rot @ (q / np.linalg.norm(q))
        s = max(float(x @ u), 0.0)
        return float(np.linalg.norm(x - s * u))

    thetas = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    qs = d_cam[None, :] + disc_radius * np.stack([np.cos(thetas), np.sin(thetas),
                                                  np.zeros(n)], axis=1)
    us = (qs / np.linalg.norm(qs, axis=1, keepdims=True)) @ rot.T
    s = np.maximum(us @ x, 0.0)
    dists = np.linalg.norm(x[None, :] - s[:, None] * us, axis=1)
    k = int(np.argmin(dists))
    h = 2 * np.pi / n
    res = minimize_scalar(dist, bounds=(thetas[k] - h, thetas[k] + h), method="bounded",
                          options={"xatol": 1e-12})
    return min(float(dists[k]), float(res.fun))


# --- boxes -----------------------------------------------------------------

def aabb_faces_bruteforce(origin, d, b_min, b_max, tol=1e-12):
    """Enter/exit distances from intersecting each of the six faces separately."""
    ts = []
    for axis in range(3):
        if d[axis] == 0:
            continue
        for bound in (b_min[axis], b_max[axis]):
            t = (bound - origin[axis]) / d[axis]
            p = origin + t * d
            others = [a for a in range(3) if a != axis]
            if all(b_min[a] - tol <= p[a] <= b_max[a] + tol for a in others):
                ts.append(t)
    if not ts:
        return None
    lo, hi = min(ts), max(ts)
    if hi < 0:
        return None
    return max(lo, 0.0), hi


# --- triangles -------------------------------------------------------------

def ray_triangles_bruteforce(vertices, triangles, origin, d):
    """Nearest positive hit by solving o + t d = a + u (b - a) + v (c - a) per triangle."""
    p = vertices[triangles]
    best = math.inf
    for a, b, c in p:
        m = np.column_stack([-d, b - a, c - a])
        if abs(np.linalg.det(m)) < 1e-14:
            continue
        t, u, v = np.linalg.solve(m, origin - a)
        if u >= 0 and v >= 0 and u + v <= 1 and t > 1e-9:
            best = min(best, t)
    return best


# --- metrics ---------------------------------------------------------------

def psnr_loop(a, b):
    total = 0.0
    n = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        total += (float(x) - float(y)) ** 2
        n += 1
    mse = total / n
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def ssim_loop(a, b, size=11, sigma=1.5):
    """Textbook SSIM: explicit Gaussian-weighted window at every valid position."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = [math.exp(-0.5 * ((i - (size - 1) / 2) / sigma) ** 2) for i in range(size)]
    s = sum(g)
    g = [v / s for v in g]
    w = np.outer(g, g)
    chans = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        vals = []
        for i in range(a.shape[0] - size + 1):
            for j in range(a.shape[1] - size + 1):
                px = x[i:i + size, j:j + size]
                py = y[i:i + size, j:j + size]
                mx = (w * px).sum()
                my = (w * py).sum()
                vx = (w * (px - mx) ** 2).sum()
                vy = (w * (py - my) ** 2).sum()
                cxy = (w * (px - mx) * (py - my)).sum()
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                            / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        chans.append(np.mean(vals))
    return float(np.mean(chans))


# --- rendering -------------------------------------------------------------

def pyramid_loop(base):
    levels = [np.asarray(base, dtype=np.float64)]
    while min(levels[-1].shape[:2]) > 1:
        prev = levels[-1]
        h, w = prev.shape[0] // 2, prev.shape[1] // 2
        nxt = np.zeros((h, w, prev.shape[2]))
        for i in range(h):
            for j in range(w):
                nxt[i, j] = (prev[2 * i, 2 * j] + prev[2 * i + 1, 2 * j]
                             + prev[2 * i, 2 * j + 1] + prev[2 * i + 1, 2 * j + 1]) / 4
        levels.append(nxt)
    return levels


def bilinear_loop(level, u, v):
    """Clamp-to-edge bilinear lookup with texel centres at (i + 0.5) / size."""
    h, w, _ = level.shape
    x = min(max(u, 0.0), 1.0) * w - 0.5
    y = min(max(v, 0.0), 1.0) * h - 0.5
    x0, y0 = math.floor(x), math.floor(y)
    fx, fy = x - x0, y - y0
    out = 0.0
    for dy, wy in ((0, 1 - fy), (1, fy)):
        for dx, wx in ((0, 1 - fx), (1, fx)):
            i = min(max(y0 + dy, 0), h - 1)
            j = min(max(x0 + dx, 0), w - 1)
            out = out + wy * wx * level[i, j]
    return out


def trimip_feature_loop(pyramids, b_min, b_max, center, radius):
    """Concatenated (xy, xz, yz) features for one sphere."""
    ext = np.asarray(b_max) - np.asarray(b_min)
    uvw = (np.asarray(center) - b_min) / ext
    feats = []
    for levels, (a, b) in zip(pyramids, ((0, 1), (0, 2), (1, 2))):
        h, w, _ = levels[0].shape
        base_r = math.sqrt(ext[a] * ext[b] / (h * w * math.pi))
        lvl = math.log2(radius / base_r) if radius > 0 else -math.inf
        lvl = min(max(lvl, 0.0), len(levels) - 1)
        l0 = int(math.floor(lvl))
        l1 = min(l0 + 1, len(levels) - 1)
        fl = lvl - l0
        f0 = bilinear_loop(levels[l0], uvw[a], uvw[b])
        f1 = bilinear_loop(levels[l1], uvw[a], uvw[b])
        feats.append((1 - fl) * f0 + fl * f1)
    return np.concatenate(feats)


def sh_loop(d):
    x, y, z = d / np.linalg.norm(d)
    return np.array([
        0.28209479177387814, -0.48860251190291987 * y, 0.48860251190291987 * z,
        -0.48860251190291987 * x, 1.0925484305920792 * x * y, -1.0925484305920792 * y * z,
        0.94617469575755997 * z * z - 0.31539156525251999, -1.0925484305920792 * x * z,
        0.54627421529603959 * (x * x - y * y), 0.59004358992664352 * y * (-3 * x * x + y * y),
        2.8906114426405538 * x * y * z, 0.45704579946446572 * y * (1 - 5 * z * z),
        0.3731763325901154 * z * (5 * z * z - 3), 0.45704579946446572 * x * (1 - 5 * z * z),
        1.4453057213202769 * z * (x * x - y * y), 0.59004358992664352 * x * (-x * x + 3 * y * y),
    ])


def mlp_loop(feat, d, P):
    relu = lambda v: np.maximum(v, 0.0)  # noqa: E731
    h = relu(feat @ P["density.w0"] + P["density.b0"])
    out = h @ P["density.w1"] + P["density.b1"]
    tau = math.exp(min(max(out[0], -15.0), 15.0))
    x = np.concatenate([out[1:], sh_loop(d)])
    h = relu(x @ P["color.w0"] + P["color.b0"])
    h = relu(h @ P["color.w1"] + P["color.b1"])
    z = h @ P["color.w2"] + P["color.b2"]
    return tau, 1.0 / (1.0 + np.exp(-z))


def render_pixel_loop(camera, i, j, bases, b_min, b_max, P, step, background):
    """Whole pipeline for one pixel written as plain loops in float64."""
    rot = camera.cam_to_world[:3, :3]
    o = camera.cam_to_world[:3, 3]
    d_cam = np.array([(i + 0.5 - camera.cx) / camera.fx, (j + 0.5 - camera.cy) / camera.fy, 1.0])
    d = rot @ d_cam
    dn = np.linalg.norm(d)
    u = d / dn
    rdot = math.sqrt((1 / camera.fx) * (1 / camera.fy) / math.pi)
    ratio = rdot / (dn * math.sqrt((math.sqrt(max(dn * dn - 1, 0)) + rdot) ** 2 + 1))
    # slab test
    t0, t1 = 0.0, math.inf
    for a in range(3):
        if u[a] == 0:
            if not b_min[a] <= o[a] <= b_max[a]:
                return np.asarray(background, dtype=np.float64)
            continue
        ta, tb = (b_min[a] - o[a]) / u[a], (b_max[a] - o[a]) / u[a]
        t0, t1 = max(t0, min(ta, tb)), min(t1, max(ta, tb))
    if t1 < t0:
        return np.asarray(background, dtype=np.float64)
    pyramids = [pyramid_loop(b) for b in bases]
    color = np.zeros(3)
    trans = 1.0
    k = 0
    while t0 + (k + 0.5) * step < t1:
        t = t0 + (k + 0.5) * step
        feat = trimip_feature_loop(pyramids, b_min, b_max, o + t * u, t * ratio)
        tau, rgb = mlp_loop(feat, u, P)
        alpha = 1 - math.exp(-tau * step)
        color += trans * alpha * rgb
        trans *= 1 - alpha
        k += 1
    return color + trans * np.asarray(background, dtype=np.float64)


def central_difference(f, x, idx, eps):
    """d f / d x[idx] by central differences (x modified in place and restored)."""
    old = x[idx]
    x[idx] = old + eps
    fp = f()
    x[idx] = old - eps
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * eps)
