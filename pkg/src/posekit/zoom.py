"""Aspect-preserving object crops and bilinear resampling.

A crop window is computed around the projected object center so that it
covers the observed and rendered silhouettes in both x and y, padded by a
fixed expansion factor, while keeping the output aspect ratio. Cropping
never clamps to the image border; samples that fall outside the source
image read as zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pose import CameraIntrinsics
from .render import MaskImage

DEFAULT_EXPAND = 1.4
DEFAULT_OUT_HW = (480, 640)
MIN_HALF_EXTENT_PX = 16.0

Bounds = tuple[float, float, float, float]  # left, right, top, bottom


@dataclass(frozen=True)
class CropWindow:
    """Axis-aligned crop region in continuous source-pixel coordinates."""

    cx: float
    cy: float
    width: float
    height: float

    @property
    def left(self) -> float:
        return self.cx - 0.5 * self.width

    @property
    def right(self) -> float:
        return self.cx + 0.5 * self.width

    @property
    def top(self) -> float:
        return self.cy - 0.5 * self.height

    @property
    def bottom(self) -> float:
        return self.cy + 0.5 * self.height

    @property
    def aspect(self) -> float:
        return self.width / self.height

    def contains(self, bounds: Bounds) -> bool:
        left, right, top, bottom = bounds
        return (self.left <= left and right <= self.right
                and self.top <= top and bottom <= self.bottom)

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: dict) -> "CropWindow":
        return cls(float(d["cx"]), float(d["cy"]),
                   float(d["width"]), float(d["height"]))


def _dists(center: tuple[float, float], bounds_list) -> tuple[float, float]:
    cu, cv = center
    x_dist = 0.0
    y_dist = 0.0
    for left, right, top, bottom in bounds_list:
        x_dist = max(x_dist, abs(left - cu), abs(right - cu))
        y_dist = max(y_dist, abs(top - cv), abs(bottom - cv))
    return x_dist, y_dist


def compute_crop(center, obs_bounds, rend_bounds, *, aspect=4.0 / 3.0,
                 expand=DEFAULT_EXPAND,
                 min_half=MIN_HALF_EXTENT_PX) -> CropWindow:
    """Fit an aspect-ratio crop around both silhouettes.

    center: projected object center (u, v) of the current pose estimate.
    obs_bounds / rend_bounds: (left, right, top, bottom) extents of the
    observed and rendered masks; either may be None, not both.

    The larger of the two per-axis center distances sets the extent; the
    smaller axis is inflated so width / height == aspect, then both are
    expanded. The per-axis distances are floored so that degenerate masks
    still produce a usable window of at least 2 * min_half pixels.
    """
    bounds_list = [b for b in (obs_bounds, rend_bounds) if b is not None]
    if not bounds_list:
        raise ValueError("compute_crop needs at least one bounds box")
    x_dist, y_dist = _dists(center, bounds_list)
    floor = min_half / expand
    x_dist = max(x_dist, floor)
    y_dist = max(y_dist, floor)
    width = max(x_dist, y_dist * aspect) * 2.0 * expand
    height = max(x_dist / aspect, y_dist) * 2.0 * expand
    return CropWindow(float(center[0]), float(center[1]), width, height)


def _bilinear(image: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Sample image at continuous pixel coords (u, v); outside reads 0.

    Pixel (i, j) is centered at (j + 0.5, i + 0.5).
    """
    h, w = image.shape[:2]
    x = u - 0.5
    y = v - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0

    out_shape = u.shape if image.ndim == 2 else u.shape + image.shape[2:]
    acc = np.zeros(out_shape, dtype=np.float64)
    for dy in (0, 1):
        for dx in (0, 1):
            xc = x0 + dx
            yc = y0 + dy
            wgt = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy)
            valid = (xc >= 0) & (xc < w) & (yc >= 0) & (yc < h)
            vals = image[yc.clip(0, h - 1), xc.clip(0, w - 1)]
            if image.ndim == 3:
                wgt = wgt[..., None]
                valid = valid[..., None]
            acc += np.where(valid, wgt * vals, 0.0)
    return acc


def _sample_grid(window: CropWindow, out_hw) -> tuple[np.ndarray, np.ndarray]:
    out_h, out_w = out_hw
    us = window.left + (np.arange(out_w) + 0.5) * (window.width / out_w)
    vs = window.top + (np.arange(out_h) + 0.5) * (window.height / out_h)
    return np.meshgrid(us, vs)


def crop_resample(image: np.ndarray, window: CropWindow,
                  out_hw=DEFAULT_OUT_HW) -> np.ndarray:
    """Bilinearly resample the crop window into an out_hw image.

    Accepts (H, W) or (H, W, C) float arrays. Output pixel (i, j) samples
    the source at the center of its corresponding window cell, so a window
    spanning the full source at the native resolution is an exact copy.
    """
    image = np.asarray(image, dtype=np.float64)
    uu, vv = _sample_grid(window, out_hw)
    return _bilinear(image, uu, vv)


def resample_mask(mask, window: CropWindow, out_hw=DEFAULT_OUT_HW,
                  threshold=0.5) -> MaskImage:
    """Resample a binary mask through the crop; >= threshold keeps a pixel."""
    data = mask.data if isinstance(mask, MaskImage) else np.asarray(mask)
    field = crop_resample(data.astype(np.float64), window, out_hw)
    return MaskImage(field >= threshold)


def zoomed_intrinsics(intr: CameraIntrinsics, window: CropWindow,
                      out_hw=DEFAULT_OUT_HW) -> CameraIntrinsics:
    """Intrinsics of the virtual camera that sees exactly the crop window.

    A point projecting to (u, v) under intr lands at
    ((u - left) * sx, (v - top) * sy) in the crop image.
    """
    out_h, out_w = out_hw
    sx = out_w / window.width
    sy = out_h / window.height
    return CameraIntrinsics(fx=intr.fx * sx, fy=intr.fy * sy,
                            cx=(intr.cx - window.left) * sx,
                            cy=(intr.cy - window.top) * sy,
                            width=out_w, height=out_h)
