"""Binary checkpoint container.

Layout (all little-endian)::

    magic     8 bytes  b"TRIMIP01"
    count     u32      number of tensors
    tensor*   u16 name length, utf-8 name, u8 dtype code, u8 ndim,
              ndim x u64 dims, raw data

Tensors are written in sorted name order, so saving the same state twice
produces identical bytes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .encoding import TriMipEncoding
from .field import FieldParams, param_shapes
from .geometry import Aabb
from .render import OccupancyGrid
from .train import ENC_NAMES, TrainConfig, TrainState

MAGIC = b"TRIMIP01"
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
CODES = {v: k for k, v in DTYPES.items()}
MAX_NDIM = 8


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    def __init__(self, name, expected, found):
        super().__init__(f"tensor {name!r}: expected shape {tuple(expected)}, found {tuple(found)}")
        self.name = name


def write_tensors(path, tensors: dict):
    parts = [MAGIC, struct.pack("<I", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
        if np.dtype(dt) not in CODES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {arr.dtype}")
        code = CODES[np.dtype(dt)]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_tensors(path) -> dict:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(MAGIC) and MAGIC.startswith(buf):
        raise CheckpointTruncatedError(f"{path}: truncated header")
    if buf[:8] != MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {buf[:8]!r} (expected {MAGIC!r})")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointTruncatedError(f"{path}: truncated at byte {pos} (needed {n} more)")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2))
        if code not in DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        if ndim > MAX_NDIM:
            raise CheckpointError(f"{path}: tensor {name!r} has {ndim} dims")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = DTYPES[code].itemsize
        for d in dims:
            size *= d
            if size > len(buf):
                raise CheckpointError(f"{path}: tensor {name!r} dims {dims} overflow the file")
        tensors[name] = np.frombuffer(take(size), dtype=DTYPES[code]).reshape(dims).copy()
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return tensors


def _text(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def state_tensors(state: TrainState) -> dict:
    cfg = state.config
    out = {}
    for name, t in state.tensors().items():
        out[name] = t
        m, v = state.moments[name]
        out[f"adam.m.{name}"] = m
        out[f"adam.v.{name}"] = v
    out["state.step"] = np.array([state.step], dtype=np.int64)
    out["state.rolling_spr"] = np.array([state.rolling_spr], dtype=np.float64)
    out["state.step_size"] = np.array([state.step_size], dtype=np.float64)
    out["state.aabb"] = np.array(state.aabb.to_list(), dtype=np.float64)
    if state.grid is not None:
        out["grid.occupancy"] = state.grid.occupancy
    out["config.json"] = _text(json.dumps(cfg.to_dict(), sort_keys=True))
    out["config.hash"] = _text(cfg.digest())
    return out


def checkpoint_save(state: TrainState, path):
    write_tensors(path, state_tensors(state))


def _expect(tensors, name, shape):
    if name not in tensors:
        raise CheckpointError(f"missing tensor {name!r}")
    if tuple(tensors[name].shape) != tuple(shape):
        raise CheckpointShapeError(name, shape, tensors[name].shape)
    return tensors[name]


def checkpoint_load(path, config: TrainConfig | None = None) -> TrainState:
    """Restore a TrainState.

    With ``config`` the stored tensors must match its geometry; a mismatch
    raises CheckpointShapeError naming the first offending tensor.
    """
    tensors = read_tensors(path)
    if "config.json" not in tensors:
        raise CheckpointError("missing tensor 'config.json'")
    stored = TrainConfig.from_dict(json.loads(tensors["config.json"].tobytes().decode("utf-8")))
    cfg = stored if config is None else config
    dtype = np.dtype(cfg.dtype)
    H = W = cfg.mip_size
    C = cfg.channels
    bases = [_expect(tensors, n, (H, W, C)).astype(dtype) for n in ENC_NAMES]
    aabb_arr = _expect(tensors, "state.aabb", (2, 3))
    aabb = Aabb(aabb_arr[0], aabb_arr[1])
    enc = TriMipEncoding(bases, aabb, cfg.mipmap)
    shapes = param_shapes(3 * C, cfg.width)
    params = FieldParams({k: _expect(tensors, f"mlp.{k}", s).astype(dtype) for k, s in shapes.items()})
    grid = None
    step_size = float(_expect(tensors, "state.step_size", (1,))[0])
    if cfg.use_grid:
        occ = _expect(tensors, "grid.occupancy", (cfg.grid_res,) * 3)
        grid = OccupancyGrid(aabb, cfg.grid_res, cfg.grid_decay, cfg.grid_threshold,
                             step_ref=step_size, occupancy=occ)
    state = TrainState(cfg, enc, params, {}, grid,
                       int(_expect(tensors, "state.step", (1,))[0]),
                       float(_expect(tensors, "state.rolling_spr", (1,))[0]), step_size)
    for name, t in state.tensors().items():
        state.moments[name] = (_expect(tensors, f"adam.m.{name}", t.shape).astype(dtype),
                               _expect(tensors, f"adam.v.{name}", t.shape).astype(dtype))
    return state


def stored_config_hash(path) -> str:
    return read_tensors(path)["config.hash"].tobytes().decode("ascii")
