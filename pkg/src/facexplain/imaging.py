"""Pixel-grid primitives shared by the whole toolkit.

Images are numpy float arrays with values in [0, 1], shaped (H, W) for
grayscale or (H, W, 3) for RGB, row-major. Relevance maps are (H, W)
float arrays. All resampling (resize, rotation, similarity warps, mask
upscaling) goes through one corner-aligned bilinear sampler so every
module shares a single interpolation convention.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image as PILImage


class ImageError(ValueError):
    """Malformed image or relevance map."""


def ensure_image(img: np.ndarray) -> np.ndarray:
    """Validate an image array and return it as float64.

    Accepts (H, W) or (H, W, C) with C in {1, 3}; values must be finite
    and lie in [0, 1].
    """
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim not in (2, 3):
        raise ImageError(f"expected 2D or 3D image array, got ndim={arr.ndim}")
    if arr.ndim == 3 and arr.shape[2] != 3:
        raise ImageError(f"expected 1 or 3 channels, got {arr.shape[2]}")
    if arr.shape[0] == 0 or arr.shape[1] == 0:
        raise ImageError("zero-size image")
    if not np.all(np.isfinite(arr)):
        raise ImageError("image contains non-finite values")
    if arr.min() < -1e-9 or arr.max() > 1 + 1e-9:
        raise ImageError("image values outside [0, 1]")
    return np.clip(arr, 0.0, 1.0)


def rotation_matrix(angle_deg: float) -> np.ndarray:
    """2x2 rotation matrix for pixel coordinates (x right, y down)."""
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    return np.array([[c, -s], [s, c]])


def sample_bilinear(
    img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: float = 0.0,
    origin: tuple[int, int] = (0, 0),
) -> np.ndarray:
    """Bilinearly sample `img` at float pixel coordinates (ys + oy, xs + ox).

    Neighbours falling outside the source grid contribute `fill`, so a
    sample fully outside the image evaluates exactly to `fill` and the
    transition at the border is continuous. `origin` is an integral
    (ox, oy) offset applied in index space, which lets callers keep their
    coordinate arithmetic in a local frame (exact under integer
    translation of the frame).
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    ys = np.asarray(ys, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)

    fy = ys - np.floor(ys)
    fx = xs - np.floor(xs)
    y0 = np.floor(ys).astype(np.int64) + int(origin[1])
    x0 = np.floor(xs).astype(np.int64) + int(origin[0])

    out_shape = ys.shape if img.ndim == 2 else (*ys.shape, img.shape[2])
    acc = np.zeros(out_shape, dtype=np.float64)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        yi = y0 + dy
        yv = (yi >= 0) & (yi < h)
        yc = np.clip(yi, 0, h - 1)
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            valid = yv & (xi >= 0) & (xi < w)
            xc = np.clip(xi, 0, w - 1)
            vals = img[yc, xc]
            vals = np.where(valid if img.ndim == 2 else valid[..., None], vals, fill)
            weight = wy * wx
            acc += vals * (weight if img.ndim == 2 else weight[..., None])
    return acc


def _corner_grid(n_out: int, n_src: int) -> np.ndarray:
    # Corner-aligned: first/last output samples land on first/last source pixels.
    if n_out == 1:
        return np.zeros(1)
    return np.arange(n_out) * (n_src - 1) / (n_out - 1)


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Resize with corner-aligned bilinear interpolation."""
    img = ensure_image(img)
    if out_w < 1 or out_h < 1:
        raise ImageError(f"output size must be >= 1, got {out_w}x{out_h}")
    ys = _corner_grid(out_h, img.shape[0])
    xs = _corner_grid(out_w, img.shape[1])
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    return np.clip(sample_bilinear(img, grid_y, grid_x), 0.0, 1.0)


def rotate_about(
    img: np.ndarray, center: tuple[float, float], angle_deg: float, fill: float = 0.0
) -> np.ndarray:
    """Rotate image content by `angle_deg` about `center` (x, y).

    A source point p maps to R(angle) @ (p - c) + c; the output is
    produced by inverse-mapped bilinear sampling, so a landmark rotated
    forward with :func:`rotation_matrix` stays on the same image
    feature. Out-of-bounds samples take `fill`.
    """
    img = ensure_image(img)
    if not np.isfinite(angle_deg):
        raise ImageError("rotation angle must be finite")
    h, w = img.shape[:2]
    cx, cy = float(center[0]), float(center[1])
    grid_y, grid_x = np.meshgrid(np.arange(h, dtype=np.float64),
                                 np.arange(w, dtype=np.float64), indexing="ij")
    rinv = rotation_matrix(-angle_deg)
    dx = grid_x - cx
    dy = grid_y - cy
    src_x = rinv[0, 0] * dx + rinv[0, 1] * dy + cx
    src_y = rinv[1, 0] * dx + rinv[1, 1] * dy + cy
    return np.clip(sample_bilinear(img, src_y, src_x, fill=fill), 0.0, 1.0)


def normalize_relevance(rmap: np.ndarray) -> np.ndarray:
    """Min-max normalize a relevance map to [0, 1].

    A constant map normalizes to all zeros. NaNs are rejected.
    """
    arr = np.asarray(rmap, dtype=np.float64)
    if arr.size == 0:
        raise ImageError("empty relevance map")
    if np.any(np.isnan(arr)):
        raise ImageError("relevance map contains NaN")
    lo = float(arr.min())
    hi = float(arr.max())
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# Persistence: PNG for 8-bit images, XHM1 sidecars for lossless float maps.
# ---------------------------------------------------------------------------

XHM1_MAGIC = b"XHM1"


def read_png(path: str | Path) -> np.ndarray:
    """Load an 8-bit PNG as a float image in [0, 1] (grayscale or RGB)."""
    with PILImage.open(path) as im:
        if im.mode in ("L", "I;16"):
            im = im.convert("L")
            arr = np.asarray(im, dtype=np.float64) / 255.0
        else:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    return arr


def write_png(path: str | Path, img: np.ndarray) -> None:
    """Write a float image in [0, 1] as an 8-bit PNG."""
    img = ensure_image(img)
    data = np.round(img * 255.0).astype(np.uint8)
    mode = "L" if data.ndim == 2 else "RGB"
    PILImage.fromarray(data, mode=mode).save(path, format="PNG")


def write_xhm1(path: str | Path, rmap: np.ndarray) -> None:
    """Write a relevance map in the raw XHM1 sidecar format.

    Layout: magic `XHM1`, u32le width, u32le height, then width*height
    float32le values row-major. Lossless, used for aggregation.
    """
    arr = np.asarray(rmap, dtype=np.float32)
    if arr.ndim != 2:
        raise ImageError("XHM1 stores single-channel maps only")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(XHM1_MAGIC)
        f.write(struct.pack("<II", w, h))
        f.write(arr.astype("<f4").tobytes(order="C"))


def read_xhm1(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != XHM1_MAGIC:
            raise ImageError(f"{path}: bad XHM1 magic {magic!r}")
        w, h = struct.unpack("<II", f.read(8))
        raw = f.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise ImageError(f"{path}: truncated XHM1 payload")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float64)


def heat_lut() -> np.ndarray:
    """256-entry black -> red -> yellow -> white lookup table, uint8 RGB."""
    lut = np.zeros((256, 3), dtype=np.uint8)
    t = np.arange(256)
    # Three equal ramps: red rises first, then green, then blue.
    lut[:, 0] = np.clip(t * 3, 0, 255)
    lut[:, 1] = np.clip(t * 3 - 255, 0, 255)
    lut[:, 2] = np.clip(t * 3 - 510, 0, 255)
    return lut


def colorize_relevance(rmap: np.ndarray) -> np.ndarray:
    """Map a [0, 1] relevance map through the heat LUT to uint8 RGB."""
    arr = np.clip(np.asarray(rmap, dtype=np.float64), 0.0, 1.0)
    idx = np.round(arr * 255.0).astype(np.uint8)
    return heat_lut()[idx]


def write_heatmap_png(path: str | Path, rmap: np.ndarray) -> None:
    """Write a color-mapped PNG of a [0, 1] relevance map."""
    rgb = colorize_relevance(rmap)
    PILImage.fromarray(rgb, mode="RGB").save(path, format="PNG")
