"""Two-view slice augmentation for contrastive pre-training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage

from .volume_data import MIN_SIDE, SliceRecord


@dataclass(frozen=True)
class AugmentConfig:
    crop_scale_range: tuple[float, float] = (0.7, 1.0)
    flip_prob: float = 0.5
    intensity_jitter: float = 0.1
    output_size: tuple[int, int] = (64, 64)
    shared_geometry: bool = False
    rotation_deg: float = 0.0  # off by default; rotations break within-window matching
    elastic_alpha: float = 0.0  # off by default for the same reason
    elastic_sigma: float = 4.0

    def __post_init__(self):
        lo, hi = self.crop_scale_range
        if not (0 < lo <= hi <= 1):
            raise ValueError(f"crop_scale_range must satisfy 0 < low <= high <= 1, got {self.crop_scale_range}")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError(f"flip_prob must be in [0, 1], got {self.flip_prob}")
        if self.intensity_jitter < 0:
            raise ValueError("intensity_jitter must be nonnegative")
        if min(self.output_size) < MIN_SIDE:
            raise ValueError(f"output_size must be >= {MIN_SIDE}, got {self.output_size}")


@dataclass(frozen=True, eq=False)
class SliceView:
    pixels: np.ndarray
    subject_id: str
    slice_index: int
    V: int
    view_id: int


def resize(pixels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if pixels.shape == tuple(size):
        return pixels.astype(np.float32, copy=True)
    t = torch.from_numpy(np.ascontiguousarray(pixels, dtype=np.float32))[None, None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0, 0].numpy()


def _sample_geometry(shape, cfg: AugmentConfig, rng: np.random.Generator) -> dict:
    H, W = shape
    lo, hi = cfg.crop_scale_range
    scale = rng.uniform(lo, hi) if hi > lo else lo
    ch = int(round(H * np.sqrt(scale)))
    cw = int(round(W * np.sqrt(scale)))
    if ch < MIN_SIDE or cw < MIN_SIDE:
        raise ValueError(f"crop of scale {scale:.3f} on {H}x{W} gives {ch}x{cw}, below {MIN_SIDE}x{MIN_SIDE}")
    top = int(rng.integers(0, H - ch + 1))
    left = int(rng.integers(0, W - cw + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg > 0 else 0.0
    return {"box": (top, left, ch, cw), "flip": flip, "angle": angle}


def _elastic(pixels: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    H, W = pixels.shape
    dy = ndimage.gaussian_filter(rng.uniform(-1, 1, (H, W)), cfg.elastic_sigma) * cfg.elastic_alpha
    dx = ndimage.gaussian_filter(rng.uniform(-1, 1, (H, W)), cfg.elastic_sigma) * cfg.elastic_alpha
    yy, xx = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    return ndimage.map_coordinates(pixels, [yy + dy, xx + dx], order=1, mode="reflect").astype(np.float32)


def apply_view(pixels: np.ndarray, geom: dict, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    top, left, ch, cw = geom["box"]
    out = resize(pixels[top : top + ch, left : left + cw], cfg.output_size)
    if geom["angle"]:
        out = ndimage.rotate(out, geom["angle"], reshape=False, order=1, mode="nearest").astype(np.float32)
    if cfg.elastic_alpha > 0:
        out = _elastic(out, cfg, rng)
    if geom["flip"]:
        out = out[:, ::-1].copy()
    if cfg.intensity_jitter > 0:
        gain = 1.0 + rng.normal(0.0, cfg.intensity_jitter)
        shift = rng.normal(0.0, cfg.intensity_jitter)
        out = (out * gain + shift).astype(np.float32)
    return out


def two_views(slice_: SliceRecord, cfg: AugmentConfig, rng: np.random.Generator) -> tuple[SliceView, SliceView]:
    """Two independent augmentations of one slice; metadata is copied unchanged."""
    geom = _sample_geometry(slice_.pixels.shape, cfg, rng)
    views = []
    for view_id in (0, 1):
        if view_id == 1 and not cfg.shared_geometry:
            geom = _sample_geometry(slice_.pixels.shape, cfg, rng)
        pix = apply_view(slice_.pixels, geom, cfg, rng)
        views.append(SliceView(pix, slice_.subject_id, slice_.slice_index, slice_.V, view_id))
    return views[0], views[1]


def hflip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1].copy()
