"""Occlusion-based local surrogate explanations over superpixels.

Samples binary keep/occlude patterns over the segmentation regions,
scores the perturbed images through the black-box classifier, fits a
kernel-weighted ridge surrogate on the patterns, and keeps only the
positive region coefficients as the relevance map.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gateway import Classifier, predict_batch
from .imaging import ensure_image
from .segmentation import SegmentationMap

_PREDICT_CHUNK = 64


class SurrogateError(RuntimeError):
    pass


@dataclass
class LimeParams:
    n_samples: int = 1000
    kernel_width: float = 0.25
    ridge: float = 1.0
    occlusion_color: float | tuple[float, float, float] = 0.0
    seed: int = 0

    def validate(self, n_regions: int) -> None:
        if self.n_samples < n_regions + 2:
            raise ValueError(
                f"n_samples={self.n_samples} too small for {n_regions} regions (need >= R+2)"
            )
        if self.kernel_width <= 0:
            raise ValueError("kernel_width must be positive")
        if self.ridge < 0:
            raise ValueError("ridge strength must be non-negative")


@dataclass
class SurrogateFit:
    coefficients: np.ndarray  # one weight per region
    intercept: float


@dataclass
class LimeResult:
    relevance: np.ndarray     # (H, W), non-negative
    fit: SurrogateFit
    region_count: int


def sample_masks(n_regions: int, n_samples: int, seed: int) -> np.ndarray:
    """Draw binary region-keep vectors, Bernoulli(0.5) per region.

    Row 0 is always the all-ones vector (the unperturbed instance), which
    anchors the surrogate at the point being explained.
    """
    if n_regions < 1:
        raise ValueError("need at least one region")
    rng = np.random.default_rng(seed)
    masks = (rng.random((n_samples, n_regions)) < 0.5).astype(np.float64)
    if n_samples >= 1:
        masks[0] = 1.0
    return masks


def perturb(img: np.ndarray, seg: SegmentationMap, z: np.ndarray,
            color: float | tuple[float, float, float] = 0.0) -> np.ndarray:
    """Copy kept regions from the image; occluded regions take `color`."""
    img = ensure_image(img)
    z = np.asarray(z)
    if z.shape != (seg.region_count,):
        raise ValueError(f"mask length {z.shape} != region count {seg.region_count}")
    if img.shape[:2] != seg.labels.shape:
        raise ValueError("image and segmentation dimensions differ")
    keep = z.astype(bool)[seg.labels]
    if img.ndim == 2:
        return np.where(keep, img, float(np.mean(color)))
    fill = np.broadcast_to(np.asarray(color, dtype=np.float64), (3,))
    return np.where(keep[..., None], img, fill)


def kernel_weight(z: np.ndarray, kernel_width: float) -> float:
    """Proximity of a binary pattern to the unperturbed instance.

    exp(-d^2 / width^2) with d the cosine distance to the all-ones
    vector; the zero vector is defined to have cosine 0 (d = 1).
    """
    z = np.asarray(z, dtype=np.float64)
    s = z.sum()
    cos = 0.0 if s == 0 else float(z.sum() / (np.linalg.norm(z) * np.sqrt(z.size)))
    d = 1.0 - cos
    return float(np.exp(-(d * d) / (kernel_width * kernel_width)))


def _kernel_weights(masks: np.ndarray, kernel_width: float) -> np.ndarray:
    s = masks.sum(axis=1)
    norm = np.linalg.norm(masks, axis=1) * np.sqrt(masks.shape[1])
    cos = np.divide(s, norm, out=np.zeros_like(s), where=norm > 0)
    d = 1.0 - cos
    return np.exp(-(d * d) / (kernel_width * kernel_width))


def fit_surrogate(masks: np.ndarray, weights: np.ndarray, targets: np.ndarray,
                  ridge: float) -> SurrogateFit:
    """Weighted ridge fit of targets on binary patterns, intercept unpenalized.

    Solves the normal equations of
    sum_i w_i (b + z_i . w - y_i)^2 + ridge * ||w||^2 in closed form.
    """
    z = np.asarray(masks, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    n, r = z.shape
    if w.shape != (n,) or y.shape != (n,):
        raise ValueError("masks, weights, and targets must agree on sample count")
    design = np.concatenate([np.ones((n, 1)), z], axis=1)
    if ridge == 0:
        scaled = design * np.sqrt(w)[:, None]
        if np.linalg.matrix_rank(scaled) < r + 1:
            raise SurrogateError(
                "design matrix is rank deficient at ridge=0; use a positive ridge strength"
            )
    ata = design.T @ (design * w[:, None])
    ata[1:, 1:] += ridge * np.eye(r)
    rhs = design.T @ (w * y)
    try:
        sol = np.linalg.solve(ata, rhs)
    except np.linalg.LinAlgError as exc:
        raise SurrogateError("singular surrogate system; use a positive ridge strength") from exc
    return SurrogateFit(coefficients=sol[1:], intercept=float(sol[0]))


def explain_lime(
    img: np.ndarray,
    seg: SegmentationMap,
    classifier: Classifier,
    class_index: int,
    params: LimeParams | None = None,
    jobs: int = 1,
) -> LimeResult:
    """Positive-relevance map for one class via the surrogate pipeline.

    Relevance is max(coefficient, 0) broadcast over each region's pixels,
    so it is constant within regions and zero wherever the surrogate sees
    no positive contribution. Deterministic for a fixed seed regardless
    of `jobs`.
    """
    img = ensure_image(img)
    params = params or LimeParams()
    params.validate(seg.region_count)
    w, h = classifier.input_size
    if img.shape[0] != h or img.shape[1] != w:
        raise ValueError(f"image is {img.shape[1]}x{img.shape[0]}, classifier expects {w}x{h}")
    if not 0 <= class_index < len(classifier.classes):
        raise ValueError(f"class index {class_index} out of range")

    masks = sample_masks(seg.region_count, params.n_samples, params.seed)
    weights = _kernel_weights(masks, params.kernel_width)

    targets = np.empty(params.n_samples)

    def run_chunk(start: int) -> tuple[int, np.ndarray]:
        stop = min(start + _PREDICT_CHUNK, params.n_samples)
        images = [perturb(img, seg, masks[i], params.occlusion_color) for i in range(start, stop)]
        return start, predict_batch(classifier, images)[:, class_index]

    starts = range(0, params.n_samples, _PREDICT_CHUNK)
    if jobs <= 1:
        results = map(run_chunk, starts)
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_chunk, starts))
    for start, probs in results:
        targets[start:start + len(probs)] = probs

    fit = fit_surrogate(masks, weights, targets, params.ridge)
    positive = np.maximum(fit.coefficients, 0.0)
    relevance = positive[seg.labels]
    return LimeResult(relevance=relevance, fit=fit, region_count=seg.region_count)
