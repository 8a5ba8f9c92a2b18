"""Randomized soft-mask saliency.

Low-resolution Bernoulli grids are bilinearly upscaled and randomly
shifted to give smooth occlusion masks (no hard edges between cells);
the saliency of a pixel is the mask-weighted average of the class score,
normalized by the masks' expected value.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gateway import Classifier, predict_batch
from .imaging import ensure_image, normalize_relevance

_MASK_CHUNK = 256


@dataclass
class RiseParams:
    n_masks: int = 4000
    grid_size: int = 7
    keep_prob: float = 0.5
    occlusion_value: float = 0.5  # grey, not black: blends rather than multiplies
    seed: int = 0

    def validate(self) -> None:
        if self.n_masks < 1:
            raise ValueError("n_masks must be >= 1")
        if self.grid_size < 1:
            raise ValueError("grid_size must be >= 1")
        if not 0.0 < self.keep_prob < 1.0:
            raise ValueError("keep_prob must lie strictly between 0 and 1")
        if not 0.0 <= self.occlusion_value <= 1.0:
            raise ValueError("occlusion_value must lie in [0, 1]")


class MaskBatch:
    """Lazy batch of upscaled masks.

    Stores the compact (s+1)x(s+1) Bernoulli grids plus per-mask crop
    shifts; full-resolution masks are materialized on demand in index
    order so the batch stays cheap at large sample counts.
    """

    def __init__(self, grids: np.ndarray, shifts: np.ndarray, out_w: int, out_h: int,
                 cell: int, keep_prob: float):
        self.grids = grids      # (N, s+1, s+1) float32 in {0, 1}
        self.shifts = shifts    # (N, 2) int, (dx, dy) in [0, cell)
        self.out_w = out_w
        self.out_h = out_h
        self.cell = cell
        self.keep_prob = keep_prob

    def __len__(self) -> int:
        return len(self.grids)

    def materialize(self, start: int, stop: int) -> np.ndarray:
        """Masks [start, stop) at full resolution, values in [0, 1]."""
        grids = self.grids[start:stop]
        dx = self.shifts[start:stop, 0]
        dy = self.shifts[start:stop, 1]
        s = grids.shape[1] - 1
        up = (s + 1) * self.cell
        scale = s / (up - 1) if up > 1 else 0.0

        ys = (dy[:, None] + np.arange(self.out_h)) * scale  # (n, H)
        xs = (dx[:, None] + np.arange(self.out_w)) * scale  # (n, W)
        y0 = np.floor(ys).astype(np.int64)
        x0 = np.floor(xs).astype(np.int64)
        fy = (ys - y0).astype(np.float32)
        fx = (xs - x0).astype(np.float32)
        idx = np.arange(len(grids))[:, None, None]
        ya = y0[:, :, None]
        xa = x0[:, None, :]
        v00 = grids[idx, ya, xa]
        v01 = grids[idx, ya, xa + 1]
        v10 = grids[idx, ya + 1, xa]
        v11 = grids[idx, ya + 1, xa + 1]
        wy = fy[:, :, None]
        wx = fx[:, None, :]
        return ((1 - wy) * ((1 - wx) * v00 + wx * v01)
                + wy * ((1 - wx) * v10 + wx * v11))

    def materialize_all(self) -> np.ndarray:
        return self.materialize(0, len(self))


def gen_masks(params: RiseParams, out_w: int, out_h: int) -> MaskBatch:
    """Sample the full mask batch for an output size.

    Each mask is an (s+1)x(s+1) Bernoulli(keep_prob) grid upscaled by
    corner-aligned bilinear interpolation to ((s+1)*C)^2 with
    C = ceil(out/s), cropped to out_w x out_h at a uniform shift in
    [0, C)^2. Mask values stay in [0, 1] and average keep_prob.
    """
    # Degenerate keep probabilities are allowed here (all-on / all-off
    # masks); the estimator itself requires 0 < p < 1.
    if params.n_masks < 1 or params.grid_size < 1:
        raise ValueError("n_masks and grid_size must be >= 1")
    if not 0.0 <= params.keep_prob <= 1.0:
        raise ValueError("keep_prob must lie in [0, 1]")
    if out_w < 1 or out_h < 1:
        raise ValueError("output dimensions must be >= 1")
    s = params.grid_size
    cell = math.ceil(max(out_w, out_h) / s)
    rng = np.random.default_rng(params.seed)
    grids = (rng.random((params.n_masks, s + 1, s + 1)) < params.keep_prob).astype(np.float32)
    shifts = rng.integers(0, cell, size=(params.n_masks, 2))
    return MaskBatch(grids, shifts, out_w, out_h, cell, params.keep_prob)


def apply_mask(img: np.ndarray, mask: np.ndarray, occlusion_value: float) -> np.ndarray:
    """Blend the image toward the occlusion value where the mask is low."""
    img = ensure_image(img)
    if mask.shape != img.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} != image shape {img.shape[:2]}")
    m = mask if img.ndim == 2 else mask[..., None]
    return img * m + occlusion_value * (1.0 - m)


@dataclass
class RiseResult:
    relevance: np.ndarray  # min-max normalized saliency
    raw: np.ndarray        # Monte Carlo estimate before normalization
    n_masks: int


def explain_rise(
    img: np.ndarray,
    classifier: Classifier,
    class_index: int,
    params: RiseParams | None = None,
    jobs: int = 1,
) -> RiseResult:
    """Saliency S = (1/(N p)) sum_i f(masked_i) * M_i, then min-max normalized.

    Accumulation runs over fixed-size chunks reduced in index order, so
    the map is bit-identical for a given seed regardless of `jobs`.
    """
    img = ensure_image(img)
    params = params or RiseParams()
    params.validate()
    w, h = classifier.input_size
    if img.shape[0] != h or img.shape[1] != w:
        raise ValueError(f"image is {img.shape[1]}x{img.shape[0]}, classifier expects {w}x{h}")
    if not 0 <= class_index < len(classifier.classes):
        raise ValueError(f"class index {class_index} out of range")

    batch = gen_masks(params, w, h)
    n = len(batch)
    img32 = img.astype(np.float32)
    g32 = np.float32(params.occlusion_value)

    def run_chunk(start: int) -> np.ndarray:
        # float32 throughout the hot path; partials are reduced in float64.
        stop = min(start + _MASK_CHUNK, n)
        masks = batch.materialize(start, stop)
        if img.ndim == 2:
            masked = img32[None] * masks + g32 * (1.0 - masks)
        else:
            m = masks[..., None]
            masked = img32[None] * m + g32 * (1.0 - m)
        probs = predict_batch(classifier, list(masked))[:, class_index]
        return np.einsum("i,ihw->hw", probs.astype(np.float32), masks).astype(np.float64)

    starts = list(range(0, n, _MASK_CHUNK))
    if jobs <= 1:
        partials = [run_chunk(s) for s in starts]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            partials = list(pool.map(run_chunk, starts))
    raw = np.zeros((h, w))
    for part in partials:  # fixed reduction order
        raw += part
    raw /= n * params.keep_prob
    return RiseResult(relevance=normalize_relevance(raw), raw=raw, n_masks=n)
