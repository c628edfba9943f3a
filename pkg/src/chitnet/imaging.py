"""Grayscale image I/O, inversion, dual-channel stacking and patch sampling.

Images are float64 numpy arrays of shape (H, W) with values in [0, 1].
"""
from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
MIN_NETWORK_SIZE = 8


class ImageValidationError(ValueError):
    pass


@dataclass
class PatchPair:
    ir_patch: np.ndarray  # (2, P, P) dual input
    vis_patch: np.ndarray
    ir_raw: np.ndarray  # (P, P)
    vis_raw: np.ndarray
    source_id: str
    offset: tuple[int, int]


def _to_unit(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float64) / 65535.0
    if np.issubdtype(arr.dtype, np.integer):
        # PIL "I" mode carries 16-bit PNGs as int32
        return arr.astype(np.float64) / (65535.0 if arr.max(initial=0) > 255 else 255.0)
    arr = arr.astype(np.float64)
    return arr / 255.0 if arr.max(initial=0.0) > 1.0 else arr


def is_color(path: str | os.PathLike) -> bool:
    """True when the file holds more than one intensity channel that differ."""
    with Image.open(path) as im:
        if im.mode in ("L", "I", "I;16", "I;16B", "I;16L", "F", "1"):
            return False
        arr = np.asarray(im.convert("RGB"))
    return not (np.array_equal(arr[..., 0], arr[..., 1]) and np.array_equal(arr[..., 1], arr[..., 2]))


def load_gray(path: str | os.PathLike) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "P":
                im = im.convert("RGBA")
            if im.mode in ("RGBA", "LA"):
                im = im.convert(im.mode[:-1])
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    if arr.size == 0 or min(arr.shape[:2]) == 0:
        raise ImageValidationError(f"zero-sized image: {path}")
    if arr.ndim == 3:
        # luminance on the native scale, then normalise
        scale = 65535.0 if arr.dtype == np.uint16 else 255.0
        rgb = arr[..., :3].astype(np.float64)
        img = (LUMA_WEIGHTS[0] * rgb[..., 0] + LUMA_WEIGHTS[1] * rgb[..., 1] + LUMA_WEIGHTS[2] * rgb[..., 2]) / scale
    else:
        img = _to_unit(arr)
    return np.clip(img, 0.0, 1.0)


def save_gray(img: np.ndarray, path: str | os.PathLike) -> None:
    """Write an 8-bit PNG (values rounded after clipping to [0, 1])."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ImageValidationError(f"expected a 2-D image, got shape {img.shape}")
    q = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(q, mode="L").save(path, format="PNG")


def validate_gray(img: np.ndarray, min_size: int = 0) -> None:
    if img.ndim != 2:
        raise ImageValidationError(f"expected a 2-D image, got shape {img.shape}")
    if min(img.shape) < max(min_size, 1):
        raise ImageValidationError(f"image {img.shape} smaller than {min_size}x{min_size}")
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ImageValidationError("intensities must lie in [0, 1]")


def invert(img: np.ndarray) -> np.ndarray:
    return 1.0 - img


def make_dual_input(img: np.ndarray) -> np.ndarray:
    """Stack ``img`` and its inversion along a new leading channel axis."""
    return np.stack([img, invert(img)], axis=0)


def crop_patches(ir: np.ndarray, vis: np.ndarray, patch: int, count: int, seed: int,
                 source_id: str = "") -> list[PatchPair]:
    """Sample ``count`` aligned crops, with replacement, from a registered pair."""
    if ir.shape != vis.shape:
        raise ImageValidationError(f"ir {ir.shape} and vis {vis.shape} differ in size")
    if count < 1:
        raise ImageValidationError("count must be >= 1")
    h, w = ir.shape
    if h < patch or w < patch:
        raise ImageValidationError(f"image {ir.shape} smaller than patch {patch}")
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, h - patch + 1, size=count)
    cols = rng.integers(0, w - patch + 1, size=count)
    pairs = []
    for r, c in zip(rows.tolist(), cols.tolist()):
        ir_raw = ir[r:r + patch, c:c + patch].copy()
        vis_raw = vis[r:r + patch, c:c + patch].copy()
        pairs.append(PatchPair(make_dual_input(ir_raw), make_dual_input(vis_raw),
                               ir_raw, vis_raw, source_id, (r, c)))
    return pairs


def list_pairs(root: str | os.PathLike) -> list[tuple[str, Path, Path]]:
    """Match ``root/ir`` against ``root/vis`` by file name.

    Any name present on only one side is an error.
    """
    root = Path(root)
    ir_dir, vis_dir = root / "ir", root / "vis"
    for d in (ir_dir, vis_dir):
        if not d.is_dir():
            raise ImageValidationError(f"missing dataset directory: {d}")
    ir_names = {p.name for p in ir_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    vis_names = {p.name for p in vis_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES}
    unmatched = sorted(ir_names ^ vis_names)
    if unmatched:
        raise ImageValidationError(f"unmatched file names between ir/ and vis/: {unmatched}")
    return [(name, ir_dir / name, vis_dir / name) for name in sorted(ir_names)]


def load_dataset(root: str | os.PathLike) -> list[tuple[str, np.ndarray, np.ndarray]]:
    out = []
    for name, ir_path, vis_path in list_pairs(root):
        ir, vis = load_gray(ir_path), load_gray(vis_path)
        if ir.shape != vis.shape:
            raise ImageValidationError(f"{name}: ir {ir.shape} vs vis {vis.shape}")
        out.append((name, ir, vis))
    if not out:
        raise ImageValidationError(f"no image pairs under {root}")
    return out
