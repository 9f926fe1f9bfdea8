"""Gaussian heatmap targets and argmax decoding.

Keypoints are ``(J, 3)`` arrays of ``(x, y, v)`` with COCO visibility flags:
0 unlabeled, 1 labeled but occluded, 2 labeled and visible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import HEATMAP_STRIDE


@dataclass
class HeatmapTarget:
    maps: np.ndarray     # (J, H, W)
    weights: np.ndarray  # (J,)


def _to_heatmap_coords(xy: np.ndarray, transform, stride: float) -> np.ndarray:
    if transform is not None:
        xy = transform.apply(xy)
    return np.asarray(xy, dtype=np.float64) / stride


def encode(kps, heatmap_size: tuple[int, int], sigma: float = 2.0, transform=None,
           stride: float = HEATMAP_STRIDE, subpixel: bool = False) -> HeatmapTarget:
    """Render one unnormalized Gaussian (peak 1) per labeled joint.

    ``transform`` (a ``CropTransform``) maps image pixels to network input
    pixels; input pixels are divided by ``stride`` to reach heatmap pixels.
    The bump is centred on the rounded heatmap pixel and truncated to a
    ``6 * sigma + 1`` window. ``subpixel=True`` centres it on the exact
    coordinate instead, which is how a well-trained network's output looks.
    Joints whose centre falls outside the map get weight 0.
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    kps = np.asarray(kps, dtype=np.float64)
    h, w = heatmap_size
    j = kps.shape[0]
    maps = np.zeros((j, h, w))
    weights = np.zeros(j)
    xy = _to_heatmap_coords(kps[:, :2], transform, stride)
    radius = int(np.ceil(3 * sigma))
    ys = np.arange(h, dtype=np.float64)[:, None]
    xs = np.arange(w, dtype=np.float64)[None, :]
    for i in range(j):
        if kps[i, 2] <= 0 or not np.all(np.isfinite(xy[i])):
            continue
        cx, cy = (int(np.floor(xy[i, 0] + 0.5)), int(np.floor(xy[i, 1] + 0.5)))
        if not (0 <= cx < w and 0 <= cy < h):
            continue
        mx, my = (xy[i, 0], xy[i, 1]) if subpixel else (cx, cy)
        g = np.exp(-((xs - mx) ** 2 + (ys - my) ** 2) / (2 * sigma ** 2))
        window = (np.abs(xs - cx) <= radius) & (np.abs(ys - cy) <= radius)
        maps[i] = np.where(window, g, 0.0)
        weights[i] = 1.0
    return HeatmapTarget(maps, weights)


def hard_negative_target(joints: int, heatmap_size: tuple[int, int]) -> HeatmapTarget:
    """All-zero maps with every joint weighted, so any activation is penalized."""
    h, w = heatmap_size
    return HeatmapTarget(np.zeros((joints, h, w)), np.ones(joints))


def argmax_locations(heatmaps: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Integer peak ``(x, y)`` per map and the peak value."""
    hm = np.asarray(heatmaps, dtype=np.float64)
    j, h, w = hm.shape
    flat = hm.reshape(j, -1)
    idx = flat.argmax(axis=1)
    scores = flat[np.arange(j), idx]
    coords = np.stack([idx % w, idx // w], axis=1).astype(np.float64)
    return coords, scores


def decode(heatmaps, transform=None, stride: float = HEATMAP_STRIDE, refine: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Peak locations mapped back to image pixels, plus per-joint scores.

    With ``refine`` the peak moves a quarter pixel toward the larger
    neighbour on each axis. Maps with no positive value score 0.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    j, h, w = hm.shape
    coords, scores = argmax_locations(hm)
    if refine:
        for i in range(j):
            px, py = int(coords[i, 0]), int(coords[i, 1])
            if 0 < px < w - 1:
                coords[i, 0] += 0.25 * np.sign(hm[i, py, px + 1] - hm[i, py, px - 1])
            if 0 < py < h - 1:
                coords[i, 1] += 0.25 * np.sign(hm[i, py + 1, px] - hm[i, py - 1, px])
    scores = np.maximum(scores, 0.0)
    xy = coords * stride
    if transform is not None:
        xy = transform.invert(xy)
    return xy, scores
