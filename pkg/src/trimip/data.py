"""Datasets: frames, multi-scale compilation, Blender-format I/O and PNG I/O."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import Aabb, Camera

# OpenGL camera axes (y up, z backward) <-> image axes (y down, z forward)
GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])
SCALE_FACTORS = (1, 2, 4, 8)


class DatasetError(ValueError):
    """Malformed dataset on disk or inconsistent frames."""


@dataclass
class Frame:
    camera: Camera
    image: np.ndarray       # (H, W, 4) straight rgb + alpha in [0, 1]
    scale: float = 1.0      # 1, 1/2, 1/4, 1/8
    name: str = ""

    def __post_init__(self):
        h, w = self.image.shape[:2]
        if (h, w) != (self.camera.height, self.camera.width):
            raise DatasetError(f"frame {self.name!r}: image {w}x{h} does not match camera "
                               f"{self.camera.width}x{self.camera.height}")

    def over(self, background) -> np.ndarray:
        """RGB composited over ``background``."""
        a = self.image[..., 3:4]
        return self.image[..., :3] * a + np.asarray(background) * (1.0 - a)


@dataclass
class Dataset:
    frames: list
    aabb: Aabb
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.frames)

    def scales(self):
        return sorted({f.scale for f in self.frames}, reverse=True)

    def at_scale(self, scale) -> list:
        return [f for f in self.frames if f.scale == scale]


def downscale_box(image: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter an (H, W, C) image by an integer factor.

    With an alpha channel (C == 4) colour is averaged premultiplied and then
    un-premultiplied, so compositing the result over any background equals the
    box filter of the composited full-resolution image.
    """
    if factor == 1:
        return image.copy()
    h, w = image.shape[:2]
    if h % factor or w % factor:
        raise DatasetError(f"image {w}x{h} is not divisible by {factor}")
    img = np.asarray(image, dtype=np.float64)

    def pool(x):
        return x.reshape(h // factor, factor, w // factor, factor, -1).mean(axis=(1, 3))

    if img.ndim == 3 and img.shape[2] == 4:
        alpha = pool(img[..., 3:4])
        prem = pool(img[..., :3] * img[..., 3:4])
        rgb = np.where(alpha > 0, prem / np.where(alpha > 0, alpha, 1.0), 0.0)
        return np.concatenate([rgb, alpha], axis=2)
    out = pool(img if img.ndim == 3 else img[..., None])
    return out if img.ndim == 3 else out[..., 0]


def compile_multiscale(frames, factors=SCALE_FACTORS) -> list:
    """Full-resolution frames plus their 1/2, 1/4, 1/8 versions, concatenated."""
    biggest = max(factors)
    out = {k: [] for k in factors}
    for fr in frames:
        h, w = fr.image.shape[:2]
        if h % biggest or w % biggest:
            raise DatasetError(f"frame {fr.name!r}: {w}x{h} must be divisible by {biggest}")
        for k in factors:
            out[k].append(Frame(fr.camera.scaled(1.0 / k), downscale_box(fr.image, k),
                                fr.scale / k, fr.name if k == 1 else f"{fr.name}_d{k}"))
    return [f for k in factors for f in out[k]]


def save_png(path, image):
    """8-bit PNG; values quantized with round(v * 255), no gamma."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        mode = "L"
    elif img.shape[2] == 3:
        mode = "RGB"
    elif img.shape[2] == 4:
        mode = "RGBA"
    else:
        raise ValueError(f"cannot save image with shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(q, mode=mode).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    """Float image in [0, 1] with the file's channels (grey, RGB or RGBA)."""
    with Image.open(path) as im:
        im.load()
        if im.mode not in ("L", "RGB", "RGBA"):
            im = im.convert("RGBA")
        arr = np.asarray(im, dtype=np.float64)
    return arr / 255.0


def _as_rgba(img):
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    if img.shape[2] == 3:
        img = np.concatenate([img, np.ones(img.shape[:2] + (1,))], axis=2)
    return img


def camera_from_gl(c2w_gl, width, height, camera_angle_x) -> Camera:
    fx = 0.5 * width / np.tan(0.5 * camera_angle_x)
    c2w = np.asarray(c2w_gl, dtype=np.float64) @ GL_TO_CV
    return Camera(width, height, fx, fx, width / 2.0, height / 2.0, c2w)


def camera_to_gl(camera: Camera) -> np.ndarray:
    return camera.cam_to_world @ GL_TO_CV


def load_blender_split(path, split, scales=True) -> list:
    """Frames of ``transforms_{split}.json``.

    Frames may carry a ``scale`` key (our multi-scale extension); frames
    without one are full resolution. With ``scales=False`` only full-res
    frames are returned.
    """
    fn = os.path.join(path, f"transforms_{split}.json")
    try:
        with open(fn) as fh:
            meta = json.load(fh)
    except FileNotFoundError as exc:
        raise DatasetError(f"missing {fn}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{fn}: invalid JSON ({exc})") from exc
    for key in ("camera_angle_x", "frames"):
        if key not in meta:
            raise DatasetError(f"{fn}: missing key {key!r}")
    angle = float(meta["camera_angle_x"])
    frames = []
    for k, entry in enumerate(meta["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in entry:
                raise DatasetError(f"{fn}: frame {k} missing key {key!r}")
        scale = float(entry.get("scale", 1.0))
        if not scales and scale != 1.0:
            continue
        rel = entry["file_path"]
        if not os.path.splitext(rel)[1]:
            rel += ".png"
        img = _as_rgba(load_png(os.path.join(path, rel)))
        h, w = img.shape[:2]
        cam = camera_from_gl(entry["transform_matrix"], w, h, angle)
        if "camera_angle_y" in meta:
            fy = 0.5 * h / np.tan(0.5 * float(meta["camera_angle_y"]))
            if abs(fy - cam.fx) > 1e-6 * cam.fx:
                raise DatasetError(f"{fn}: non-square pixels (fx={cam.fx:.6g}, fy={fy:.6g})")
        name = os.path.splitext(os.path.basename(rel))[0]
        frames.append(Frame(cam, img, scale, name))
    return frames


def load_blender_dataset(path, split="train", scales=True) -> Dataset:
    frames = load_blender_split(path, split, scales)
    with open(os.path.join(path, f"transforms_{split}.json")) as fh:
        meta = json.load(fh)
    if "aabb" in meta:
        aabb = Aabb(*meta["aabb"])
    else:
        aabb = Aabb.cube(1.5)  # the usual bound for Blender synthetic scenes
    extra = {k: v for k, v in meta.items() if k not in ("frames",)}
    return Dataset(frames, aabb, extra)


def write_blender_split(path, split, frames, camera_angle_x, aabb: Aabb, extra=None):
    """Write frames as PNGs plus ``transforms_{split}.json``."""
    os.makedirs(os.path.join(path, split), exist_ok=True)
    entries = []
    for fr in frames:
        rel = f"./{split}/{fr.name}"
        save_png(os.path.join(path, split, fr.name + ".png"), fr.image)
        entry = {"file_path": rel, "transform_matrix": camera_to_gl(fr.camera).tolist()}
        if fr.scale != 1.0:
            entry["scale"] = fr.scale
        entries.append(entry)
    meta = {"camera_angle_x": float(camera_angle_x), "aabb": aabb.to_list()}
    meta.update(extra or {})
    meta["frames"] = entries
    with open(os.path.join(path, f"transforms_{split}.json"), "w") as fh:
        json.dump(meta, fh, indent=1)
