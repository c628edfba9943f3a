"""Deterministic street-scene style infrared/visible pairs for desk-scale runs.

The visible image carries texture and fine structure (building windows, lane
markings, foliage); the infrared image carries warm targets (pedestrians,
vehicles) that are dim or hidden in the visible one. Both share the coarse
scene layout, as registered sensor pairs do.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .imaging import save_gray


def _ellipse(h, w, cy, cx, ry, rx):
    yy, xx = np.mgrid[0:h, 0:w]
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


MIN_SIZE = 24


def make_pair(size: int = 96, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    if size < MIN_SIZE:
        raise ValueError(f"size must be >= {MIN_SIZE}, got {size}")
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w] / size
    horizon = int(h * rng.uniform(0.35, 0.5))

    vis = np.empty((h, w))
    ir = np.empty((h, w))
    vis[:horizon] = 0.75 + 0.2 * (1 - yy[:horizon])  # bright sky
    ir[:horizon] = 0.12 + 0.05 * yy[:horizon]  # cold sky
    vis[horizon:] = 0.45 + 0.1 * yy[horizon:]
    ir[horizon:] = 0.35 + 0.05 * yy[horizon:]

    # buildings with window grids: textured in visible, flat-ish in infrared
    x0 = 0
    while x0 < w:
        bw = int(rng.integers(max(size // 8, 2), max(size // 4, 3)))
        top = int(rng.integers(horizon // 4, horizon))
        shade = rng.uniform(0.2, 0.6)
        vis[top:horizon, x0:x0 + bw] = shade
        ir[top:horizon, x0:x0 + bw] = rng.uniform(0.3, 0.45)
        period = int(rng.integers(4, 7))
        win = ((np.arange(h)[:, None] % period) < period // 2) & ((np.arange(w)[None, :] % period) < period // 2)
        block = np.zeros((h, w), bool)
        block[top + 2:horizon - 2, x0 + 2:x0 + bw - 2] = True
        vis[block & win] = np.clip(shade + rng.uniform(0.25, 0.4), 0, 1)
        x0 += bw + int(rng.integers(2, max(size // 10, 3)))

    # lane markings, visible only
    for lane in rng.uniform(0.25, 0.75, size=2):
        col = int(lane * w)
        for r in range(horizon + 2, h, 8):
            vis[r:r + 4, max(col - 1, 0):col + 2] = 0.95

    # foliage texture in the visible band near the horizon
    tex = gaussian_filter(rng.standard_normal((h, w)), 1.0)
    band = np.zeros((h, w), bool)
    band[max(horizon - size // 10, 0):horizon + size // 12, : w // 3] = True
    vis[band] += 0.25 * tex[band]

    # warm targets: bright in infrared, dim or shadowed in visible
    for _ in range(int(rng.integers(2, 5))):
        cy = int(rng.integers(horizon + 4, h - 6))
        cx = int(rng.integers(6, w - 6))
        if rng.random() < 0.6:
            m = _ellipse(h, w, cy, cx, rng.uniform(4, 8), rng.uniform(1.5, 3))  # pedestrian
        else:
            m = _ellipse(h, w, cy, cx, rng.uniform(3, 5), rng.uniform(6, 11))  # vehicle
        ir[m] = rng.uniform(0.8, 0.98)
        vis[m] = rng.uniform(0.25, 0.45)

    # a shadowed region that hides part of the visible scene
    sy, sx = int(rng.integers(horizon, h)), int(rng.integers(0, w))
    shadow = _ellipse(h, w, sy, sx, size / 5, size / 4)
    vis[shadow] *= 0.35

    vis = gaussian_filter(vis, 0.6) + 0.01 * rng.standard_normal((h, w))
    ir = gaussian_filter(ir, 1.2) + 0.005 * rng.standard_normal((h, w))
    return np.clip(ir, 0.0, 1.0), np.clip(vis, 0.0, 1.0)


def make_dataset(count: int = 8, size: int = 96, seed: int = 0) -> list[tuple[str, np.ndarray, np.ndarray]]:
    return [(f"scene{i:02d}.png", *make_pair(size, seed * 1000 + i)) for i in range(count)]


def write_dataset(root: str | Path, count: int = 8, size: int = 96, seed: int = 0) -> Path:
    root = Path(root)
    for name, ir, vis in make_dataset(count, size, seed):
        save_gray(ir, root / "ir" / name)
        save_gray(vis, root / "vis" / name)
    return root
