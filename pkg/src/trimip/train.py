"""Optimisation: area-weighted loss, AdamW, step schedule and dynamic batching."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .encoding import PLANES, TriMipEncoding
from .field import FieldParams, field_backward_cached
from .geometry import Aabb, ConeBatch, camera_cones, default_step, sample_batch
from .render import (OccupancyGrid, _composite_packed, _eval_samples, composite_packed_backward,
                     occupancy_update, render_image)

ENC_NAMES = tuple(f"enc.{p}" for p in PLANES)
MIN_RAYS = 64
MAX_RAYS = 1 << 18


class TrainingError(RuntimeError):
    """Raised when a step produces a non-finite loss."""


@dataclass
class TrainConfig:
    base_lr: float = 2e-3
    enc_lr_scale: float = 10.0
    weight_decay: float = 1e-5
    total_steps: int = 25000
    lr_decay_steps: tuple = (12000, 18000, 20000, 22000)
    lr_decay_factor: float = 0.6
    target_spheres: int = 262144
    seed: int = 0
    background: tuple = (1.0, 1.0, 1.0)
    mip_size: int = 64
    channels: int = 8
    width: int = 128
    mipmap: bool = True
    dtype: str = "float32"
    init_range: float = 0.01
    step: float | None = None          # marching step; None -> AABB diagonal / 256
    grid_res: int = 64
    grid_every: int = 16
    grid_decay: float = 0.95
    grid_threshold: float = 1e-3        # on tau * step
    use_grid: bool = True
    jitter: bool = True                # random per-ray lattice offset while training
    init_spheres_per_ray: float = 128.0
    rolling_momentum: float = 0.9

    def __post_init__(self):
        self.lr_decay_steps = tuple(int(s) for s in self.lr_decay_steps)
        self.background = tuple(float(c) for c in self.background)
        for name in ("base_lr", "enc_lr_scale", "total_steps", "lr_decay_factor", "target_spheres",
                     "mip_size", "channels", "width", "grid_res", "grid_every", "grid_decay",
                     "grid_threshold", "init_spheres_per_ray", "init_range"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if list(self.lr_decay_steps) != sorted(self.lr_decay_steps):
            raise ValueError("lr_decay_steps must be sorted ascending")
        if self.lr_decay_steps and self.lr_decay_steps[-1] >= self.total_steps:
            raise ValueError("lr_decay_steps must be below total_steps")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if len(self.background) != 3 or not all(0 <= c <= 1 for c in self.background):
            raise ValueError("background must be three values in [0, 1]")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_steps"] = list(self.lr_decay_steps)
        d["background"] = list(self.background)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


@dataclass
class TrainState:
    config: TrainConfig
    enc: TriMipEncoding
    params: FieldParams
    moments: dict                  # name -> (m, v)
    grid: OccupancyGrid | None
    step: int = 0
    rolling_spr: float = 128.0     # rolling mean of spheres per ray
    step_size: float = field(default=0.0)

    @property
    def aabb(self) -> Aabb:
        return self.enc.aabb

    def tensors(self) -> dict:
        """Every trainable tensor by name (encoding bases are live views)."""
        out = {n: b for n, b in zip(ENC_NAMES, self.enc.bases)}
        out.update({f"mlp.{k}": v for k, v in self.params.tensors.items()})
        return out


def init_state(cfg: TrainConfig, aabb: Aabb) -> TrainState:
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng([cfg.seed, 0xE1C])
    enc = TriMipEncoding.random(aabb, cfg.mip_size, cfg.mip_size, cfg.channels, rng=rng,
                                dtype=dtype, mipmap=cfg.mipmap, init_range=cfg.init_range)
    params = FieldParams.glorot(enc.feat_dim, cfg.width, rng=rng, dtype=dtype)
    step = default_step(aabb) if cfg.step is None else cfg.step
    grid = None
    if cfg.use_grid:
        grid = OccupancyGrid(aabb, cfg.grid_res, cfg.grid_decay, cfg.grid_threshold, step_ref=step)
    state = TrainState(cfg, enc, params, {}, grid, 0, float(cfg.init_spheres_per_ray), step)
    state.moments = {k: (np.zeros_like(v), np.zeros_like(v)) for k, v in state.tensors().items()}
    return state


@dataclass
class RayPool:
    """Every pixel of every frame as a cone with its target colour and loss weight."""

    cones: ConeBatch
    rgb: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return self.rgb.shape[0]

    @classmethod
    def from_dataset(cls, dataset: Dataset, background) -> "RayPool":
        if not dataset.frames:
            raise ValueError("dataset has no frames")
        cones, rgb, weight = [], [], []
        for fr in dataset.frames:
            c = camera_cones(fr.camera)
            cones.append(c)
            rgb.append(fr.over(background).reshape(-1, 3))
            # area weight relative to the full-resolution pixel of the same camera
            full = c.disc_radius * fr.scale
            weight.append((c.disc_radius / full) ** 2)
        return cls(ConeBatch.concat(cones), np.concatenate(rgb), np.concatenate(weight))

    def batch(self, idx):
        return self.cones.subset(idx), self.rgb[idx], self.weight[idx]


def photometric_loss(pred, gt, weight):
    """Area-weighted MSE normalised by the weight sum; returns (loss, d loss / d pred)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    weight = np.asarray(weight, dtype=np.float64)
    if np.any(weight <= 0):
        raise ValueError("loss weights must be positive")
    diff = pred - gt
    wsum = weight.sum()
    loss = float(np.sum(weight * np.mean(diff * diff, axis=-1)) / wsum)
    grad = (2.0 / 3.0) * diff * (weight / wsum)[..., None]
    return loss, grad


def lr_at(step: int, cfg: TrainConfig):
    """(mlp lr, encoding lr) at ``step`` under the multi-step schedule."""
    n = sum(1 for s in cfg.lr_decay_steps if s <= step)
    lr = cfg.base_lr * cfg.lr_decay_factor ** n
    return lr, lr * cfg.enc_lr_scale


def adamw_update(tensor, grad, moments, lr, wd, betas=(0.9, 0.999), eps=1e-8, step=1):
    """In-place AdamW on ``tensor``; ``moments`` is (m, v), ``step`` counts from 1."""
    m, v = moments
    b1, b2 = betas
    dt = tensor.dtype
    m *= b1
    m += (1 - b1) * grad.astype(dt, copy=False)
    v *= b2
    v += (1 - b2) * np.square(grad, dtype=np.float64).astype(dt, copy=False)
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    if wd:
        tensor *= dt.type(1 - lr * wd)
    tensor -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(dt, copy=False)
    return tensor


def dynamic_batch(rolling_spheres_per_ray: float, cfg: TrainConfig) -> int:
    if not rolling_spheres_per_ray > 0:
        raise ValueError("rolling average must be positive")
    n = round(cfg.target_spheres / rolling_spheres_per_ray)
    return int(min(max(n, MIN_RAYS), MAX_RAYS))


def loss_and_grads(state: TrainState, cones: ConeBatch, gt, weight, use_grid=True, offset=None):
    """Forward render, weighted loss and exact gradients for every trainable tensor.

    ``offset`` shifts each ray's sample lattice (see ``uniform_distances``).
    Returns (loss, grads by tensor name, prediction, number of spheres).
    """
    enc, params = state.enc, state.params
    bg = np.asarray(state.config.background, dtype=np.float64)
    grid = state.grid if use_grid else None
    packed = sample_batch(cones, enc.aabb, state.step_size, grid, offset=offset)
    grads = {k: np.zeros_like(v) for k, v in state.tensors().items()}
    if packed.t.size == 0:
        pred = np.tile(bg, (len(cones), 1))
        loss, _ = photometric_loss(pred, gt, weight)
        return loss, grads, pred, 0
    tau, rgb, cache, centers, radii = _eval_samples(cones, packed, enc, params)
    delta = np.full(tau.shape, state.step_size)
    res = _composite_packed(tau, rgb, delta, packed.t, packed.offsets, bg)
    loss, g_pred = photometric_loss(res["rgb"], gt, weight)
    g_tau, g_rgb = composite_packed_backward(tau, rgb, delta, packed.offsets, bg, g_pred)
    mlp_grads, g_f = field_backward_cached(cache, params, g_tau, g_rgb)
    enc_grads = enc.backward_many(centers, radii, g_f)
    for name, g in zip(ENC_NAMES, enc_grads.as_list()):
        grads[name] = g
    for k, g in mlp_grads.items():
        grads[f"mlp.{k}"] = g
    return loss, grads, res["rgb"], int(packed.t.size)


def train_step(state: TrainState, pool: RayPool, rng=None):
    """One optimisation step; returns (state, stats).

    Without an explicit ``rng`` the batch is drawn from a generator seeded by
    (seed, step), so a resumed run replays the same batches.
    """
    cfg = state.config
    if len(pool) == 0:
        raise ValueError("empty ray pool")
    if rng is None:
        rng = np.random.default_rng([cfg.seed, state.step])
    n_rays = dynamic_batch(state.rolling_spr, cfg)
    idx = rng.integers(0, len(pool), n_rays)
    cones, gt, weight = pool.batch(idx)
    offset = rng.random(n_rays) if cfg.jitter else None
    loss, grads, pred, n_spheres = loss_and_grads(state, cones, gt, weight, offset=offset)
    lr_mlp, lr_enc = lr_at(state.step, cfg)
    if not np.isfinite(loss):
        norms = {k: float(np.linalg.norm(g)) for k, g in grads.items()}
        raise TrainingError(f"non-finite loss at step {state.step} (lr={lr_mlp:g}/{lr_enc:g}); "
                            f"grad norms: {norms}")
    tensors = state.tensors()
    for name, tensor in tensors.items():
        lr = lr_enc if name.startswith("enc.") else lr_mlp
        adamw_update(tensor, grads[name], state.moments[name], lr, cfg.weight_decay,
                     step=state.step + 1)
    state.enc.rebuild()
    state.step += 1
    spr = max(n_spheres / n_rays, 1e-3)
    state.rolling_spr = cfg.rolling_momentum * state.rolling_spr + (1 - cfg.rolling_momentum) * spr
    if state.grid is not None and state.step % cfg.grid_every == 0:
        occupancy_update(state.grid, state.enc, state.params, state.step, cfg.seed)
    mse = float(np.mean((pred - gt) ** 2))
    stats = {
        "step": state.step,
        "loss": loss,
        "psnr_batch": float("inf") if mse == 0 else float(-10.0 * np.log10(mse)),
        "n_rays": n_rays,
        "n_spheres": n_spheres,
        "lr": lr_mlp,
    }
    return state, stats


def format_log(stats: dict) -> str:
    """One plain-text log line; floats use repr so logs can be bit-compared."""
    return (f"step={stats['step']} loss={stats['loss']!r} psnr={stats['psnr_batch']!r} "
            f"n_rays={stats['n_rays']} n_spheres={stats['n_spheres']} lr={stats['lr']!r}")


def train(state: TrainState, pool: RayPool, steps: int | None = None, log=None, callback=None):
    """Run until ``steps`` more steps or ``total_steps`` are done."""
    end = state.config.total_steps if steps is None else min(state.step + steps,
                                                             state.config.total_steps)
    while state.step < end:
        _, stats = train_step(state, pool)
        if log is not None:
            log(format_log(stats))
        if callback is not None:
            callback(state, stats)
    return state


def render_state(state: TrainState, camera, use_grid=True, early_stop=1e-4, threads=1,
                 return_stats=False):
    return render_image(camera, state.enc, state.params, state.grid if use_grid else None,
                        state.step_size, state.config.background, early_stop, threads, return_stats)

