"""Tiny MLP mapping (feature, view direction) to density and colour.

Density head: feature -> width -> 16, ReLU in between. Output 0 goes through a
truncated exponential to give density, outputs 1..15 are the geometric feature.
Colour head: [geometric feature, SH(dir)] -> width -> width -> 3, ReLU between
layers and a sigmoid on the output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

GEO_DIM = 15
SH_DIM = 16
EXP_CLAMP = 15.0

PARAM_NAMES = (
    "density.w0", "density.b0", "density.w1", "density.b1",
    "color.w0", "color.b0", "color.w1", "color.b1", "color.w2", "color.b2",
)


def param_shapes(feat_dim: int, width: int):
    return {
        "density.w0": (feat_dim, width), "density.b0": (width,),
        "density.w1": (width, 1 + GEO_DIM), "density.b1": (1 + GEO_DIM,),
        "color.w0": (GEO_DIM + SH_DIM, width), "color.b0": (width,),
        "color.w1": (width, width), "color.b1": (width,),
        "color.w2": (width, 3), "color.b2": (3,),
    }


@dataclass
class FieldParams:
    tensors: dict

    @classmethod
    def glorot(cls, feat_dim: int, width: int = 128, rng=None, dtype=np.float32):
        """Glorot-uniform weights, zero biases."""
        rng = np.random.default_rng(rng)
        tensors = {}
        for name, shape in param_shapes(feat_dim, width).items():
            if len(shape) == 2:
                lim = np.sqrt(6.0 / (shape[0] + shape[1]))
                tensors[name] = rng.uniform(-lim, lim, shape).astype(dtype)
            else:
                tensors[name] = np.zeros(shape, dtype=dtype)
        return cls(tensors)

    @classmethod
    def zeros(cls, feat_dim: int, width: int = 128, dtype=np.float64):
        return cls({k: np.zeros(s, dtype=dtype) for k, s in param_shapes(feat_dim, width).items()})

    @property
    def feat_dim(self) -> int:
        return self.tensors["density.w0"].shape[0]

    @property
    def width(self) -> int:
        return self.tensors["density.w0"].shape[1]

    @property
    def dtype(self):
        return self.tensors["density.w0"].dtype

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "FieldParams":
        return FieldParams({k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "FieldParams":
        return FieldParams({k: v.astype(dtype) for k, v in self.tensors.items()})


@dataclass
class FieldOutput:
    tau: np.ndarray
    rgb: np.ndarray


def sh_encode(dirs) -> np.ndarray:
    """Real spherical harmonics up to degree 3 (16 values) of unit directions."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    d = d / np.linalg.norm(d, axis=-1, keepdims=True)
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty((d.shape[0], SH_DIM))
    out[:, 0] = 0.28209479177387814
    out[:, 1] = -0.48860251190291987 * y
    out[:, 2] = 0.48860251190291987 * z
    out[:, 3] = -0.48860251190291987 * x
    out[:, 4] = 1.0925484305920792 * x * y
    out[:, 5] = -1.0925484305920792 * y * z
    out[:, 6] = 0.94617469575755997 * zz - 0.31539156525251999
    out[:, 7] = -1.0925484305920792 * x * z
    out[:, 8] = 0.54627421529603959 * (xx - yy)
    out[:, 9] = 0.59004358992664352 * y * (-3.0 * xx + yy)
    out[:, 10] = 2.8906114426405538 * x * y * z
    out[:, 11] = 0.45704579946446572 * y * (1.0 - 5.0 * zz)
    out[:, 12] = 0.3731763325901154 * z * (5.0 * zz - 3.0)
    out[:, 13] = 0.45704579946446572 * x * (1.0 - 5.0 * zz)
    out[:, 14] = 1.4453057213202769 * z * (xx - yy)
    out[:, 15] = 0.59004358992664352 * x * (-xx + 3.0 * yy)
    return out


def trunc_exp(x):
    return np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))


def trunc_exp_grad(x):
    # clamp is passed through: the derivative is the clamped value itself
    return np.exp(np.clip(x, -EXP_CLAMP, EXP_CLAMP))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def density_forward(f, params: FieldParams):
    """Density and geometric feature; returns (tau, geo, cache)."""
    P = params.tensors
    f = np.asarray(f, dtype=params.dtype)
    if f.ndim != 2 or f.shape[1] != params.feat_dim:
        raise ValueError(f"feature shape {f.shape} does not match feat_dim {params.feat_dim}")
    a0 = f @ P["density.w0"] + P["density.b0"]
    h0 = np.maximum(a0, 0)
    out = h0 @ P["density.w1"] + P["density.b1"]
    sigma_pre = out[:, 0]
    tau = trunc_exp(sigma_pre)
    return tau, out[:, 1:], (f, a0, h0, sigma_pre)


def field_forward(f, sh, params: FieldParams):
    """Batched forward. ``sh`` is (N, 16); returns (tau, rgb, cache)."""
    P = params.tensors
    tau, geo, dcache = density_forward(f, params)
    sh = np.asarray(sh, dtype=params.dtype)
    if sh.shape != (geo.shape[0], SH_DIM):
        raise ValueError(f"direction encoding shape {sh.shape} does not match batch")
    x = np.concatenate([geo, sh], axis=1)
    a1 = x @ P["color.w0"] + P["color.b0"]
    h1 = np.maximum(a1, 0)
    a2 = h1 @ P["color.w1"] + P["color.b1"]
    h2 = np.maximum(a2, 0)
    rgb = _sigmoid(h2 @ P["color.w2"] + P["color.b2"])
    return tau, rgb, dcache + (x, a1, h1, a2, h2, rgb)


def field_backward_cached(cache, params: FieldParams, g_tau, g_rgb, need_input_grad=True):
    """Reverse pass from a ``field_forward`` cache; returns (grads dict, grad_f)."""
    P = params.tensors
    f, a0, h0, sigma_pre, x, a1, h1, a2, h2, rgb = cache
    dt = params.dtype
    g_tau = np.asarray(g_tau, dtype=dt)
    g_rgb = np.asarray(g_rgb, dtype=dt)
    grads = {}
    g_z = g_rgb * rgb * (1 - rgb)
    grads["color.w2"] = h2.T @ g_z
    grads["color.b2"] = g_z.sum(axis=0)
    g_a2 = (g_z @ P["color.w2"].T) * (a2 > 0)
    grads["color.w1"] = h1.T @ g_a2
    grads["color.b1"] = g_a2.sum(axis=0)
    g_a1 = (g_a2 @ P["color.w1"].T) * (a1 > 0)
    grads["color.w0"] = x.T @ g_a1
    grads["color.b0"] = g_a1.sum(axis=0)
    g_x = g_a1 @ P["color.w0"][:GEO_DIM].T
    g_out = np.empty((f.shape[0], 1 + GEO_DIM), dtype=dt)
    g_out[:, 0] = g_tau * trunc_exp_grad(sigma_pre)
    g_out[:, 1:] = g_x
    grads["density.w1"] = h0.T @ g_out
    grads["density.b1"] = g_out.sum(axis=0)
    g_a0 = (g_out @ P["density.w1"].T) * (a0 > 0)
    grads["density.w0"] = f.T @ g_a0
    grads["density.b0"] = g_a0.sum(axis=0)
    g_f = g_a0 @ P["density.w0"].T if need_input_grad else None
    return grads, g_f


def field_eval(f, dir, params: FieldParams) -> FieldOutput:
    f = np.asarray(f)
    single = f.ndim == 1
    f2 = np.atleast_2d(f)
    d = np.atleast_2d(dir)
    sh = sh_encode(np.broadcast_to(d, (f2.shape[0], 3)))
    tau, rgb, _ = field_forward(f2, sh, params)
    if single:
        return FieldOutput(tau[0], rgb[0])
    return FieldOutput(tau, rgb)


def field_backward(f, dir, params: FieldParams, upstream):
    """Gradients of ``<upstream, (tau, rgb)>``; ``upstream`` is (g_tau, g_rgb)."""
    g_tau, g_rgb = upstream
    f2 = np.atleast_2d(f)
    sh = sh_encode(np.broadcast_to(np.atleast_2d(dir), (f2.shape[0], 3)))
    _, _, cache = field_forward(f2, sh, params)
    grads, g_f = field_backward_cached(cache, params, np.atleast_1d(g_tau), np.atleast_2d(g_rgb))
    if np.asarray(f).ndim == 1:
        g_f = g_f[0]
    return grads, g_f
