"""Canonical face space and global explanation heatmaps.

Local explanations live in image coordinates; to compare or average them
across faces they are warped into a normalized frame where the 68
landmarks always sit at the template positions. The template comes from
a generalized Procrustes mean, each explanation is carried over by the
least-squares similarity between its landmarks and the template, and the
per-class global heatmap is the average of the warped, per-image
normalized maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .facealign import eye_centroids, validate_landmarks
from .imaging import normalize_relevance, sample_bilinear


class AtlasError(ValueError):
    pass


class EmptySelectionError(AtlasError):
    """A selection policy matched no records."""


@dataclass
class Similarity2D:
    """p -> scale * R(rotation) @ p + (tx, ty), pixel coordinates."""

    scale: float
    rotation: float  # degrees
    tx: float
    ty: float

    def matrix(self) -> np.ndarray:
        t = math.radians(self.rotation)
        c, s = math.cos(t), math.sin(t)
        return self.scale * np.array([[c, -s], [s, c]])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.matrix().T + (self.tx, self.ty)

    def inverse(self) -> "Similarity2D":
        if self.scale <= 0 or not np.isfinite(self.scale):
            raise AtlasError(f"similarity with scale {self.scale} is not invertible")
        inv_m = np.linalg.inv(self.matrix())
        t = inv_m @ (-np.array([self.tx, self.ty]))
        return Similarity2D(
            scale=1.0 / self.scale, rotation=-self.rotation, tx=float(t[0]), ty=float(t[1])
        )


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> Similarity2D:
    """Least-squares similarity mapping src points onto dst points.

    Closed form from the centered cross-covariance: with both sets
    centered, the linear part [[a, -b], [b, a]] has
    a = sum<s, d> / sum|s|^2 and b = sum(s x d) / sum|s|^2.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2:
        raise AtlasError(f"point sets must share shape (n, 2), got {src.shape} vs {dst.shape}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    denom = float((sc * sc).sum())
    if denom < 1e-12:
        raise AtlasError("source points have zero variance")
    a = float((sc * dc).sum() / denom)
    b = float((sc[:, 0] * dc[:, 1] - sc[:, 1] * dc[:, 0]).sum() / denom)
    scale = math.hypot(a, b)
    if scale <= 0:
        raise AtlasError("degenerate similarity: zero scale")
    rotation = math.degrees(math.atan2(b, a))
    m = scale * np.array([[math.cos(math.radians(rotation)), -math.sin(math.radians(rotation))],
                          [math.sin(math.radians(rotation)), math.cos(math.radians(rotation))]])
    t = mu_d - m @ mu_s
    return Similarity2D(scale=scale, rotation=rotation, tx=float(t[0]), ty=float(t[1]))


@dataclass
class CanonicalTemplate:
    side: int
    points: np.ndarray  # (68, 2), eyes level, inside [0, side)^2


def _frame_to_canonical(points: np.ndarray, side: int, eye_y: float,
                        interocular: float) -> np.ndarray:
    """Similarity-normalize a shape to the template framing rule."""
    left, right = eye_centroids(points)
    theta = math.degrees(math.atan2(right[1] - left[1], right[0] - left[0]))
    t = math.radians(-theta)
    rot = np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])
    leveled = points @ rot.T
    left, right = eye_centroids(leveled)
    dist = float(np.hypot(*(right - left)))
    scale = interocular * side / dist
    leveled = leveled * scale
    mid = scale * (left + right) / 2.0
    return leveled + (np.array([side / 2.0, eye_y * side]) - mid)


def procrustes_mean(
    landmark_sets: Sequence[np.ndarray],
    side: int = 224,
    eye_y: float = 0.4,
    interocular: float = 0.3,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> CanonicalTemplate:
    """Generalized Procrustes mean of landmark sets, framed for a side x side map.

    Every iteration similarity-aligns each set to the running mean and
    re-averages until the mean moves less than `tol` per point. The
    result is framed with the eye midpoint at (side/2, eye_y*side) and
    interocular distance interocular*side.
    """
    sets = [validate_landmarks(p) for p in landmark_sets]
    if not sets:
        raise AtlasError("need at least one landmark set")
    for p in sets:
        if float(np.ptp(p, axis=0).max()) < 1e-9:
            raise AtlasError("degenerate landmark set: all points coincide")

    mean = _frame_to_canonical(sets[0], side, eye_y, interocular)
    for _ in range(max_iter):
        aligned = [fit_similarity(p, mean).apply(p) for p in sets]
        new_mean = _frame_to_canonical(np.mean(aligned, axis=0), side, eye_y, interocular)
        movement = float(np.abs(new_mean - mean).mean())
        mean = new_mean
        if movement < tol:
            break
    if mean.min() < 0 or mean.max() >= side:
        raise AtlasError("template points fall outside the canonical frame; adjust framing")
    return CanonicalTemplate(side=side, points=mean)


def warp_explanation(expl: np.ndarray, transform: Similarity2D, side: int) -> np.ndarray:
    """Resample a relevance map into the side x side canonical frame.

    Output pixel q samples the source at transform^-1(q) bilinearly;
    samples outside the source map contribute 0.
    """
    expl = np.asarray(expl, dtype=np.float64)
    if expl.ndim != 2:
        raise AtlasError("explanations are single-channel maps")
    inv = transform.inverse()
    grid = np.arange(side, dtype=np.float64)
    qy, qx = np.meshgrid(grid, grid, indexing="ij")
    m = inv.matrix()
    src_x = m[0, 0] * qx + m[0, 1] * qy + inv.tx
    src_y = m[1, 0] * qx + m[1, 1] * qy + inv.ty
    return sample_bilinear(expl, src_y, src_x, fill=0.0)


SELECTION_POLICIES = ("ground-truth", "predicted", "true-positive")


def select_positives(records: Sequence, class_name: str, policy: str = "true-positive") -> list[int]:
    """Indices of records that count as positives for a class.

    Records need `label` (ground truth) and `pred` (argmax label)
    attributes. ground-truth keeps label matches, predicted keeps argmax
    matches, true-positive needs both.
    """
    if policy not in SELECTION_POLICIES:
        raise AtlasError(f"unknown selection policy {policy!r} (expected {SELECTION_POLICIES})")
    if not records:
        raise AtlasError("no records to select from")
    picked = []
    for i, rec in enumerate(records):
        want_label = rec.label == class_name
        want_pred = rec.pred == class_name
        if policy == "ground-truth" and want_label:
            picked.append(i)
        elif policy == "predicted" and want_pred:
            picked.append(i)
        elif policy == "true-positive" and want_label and want_pred:
            picked.append(i)
    if not picked:
        raise EmptySelectionError(f"policy {policy!r} selected no records for class {class_name!r}")
    return picked


@dataclass
class GlobalHeatmap:
    map: np.ndarray        # canonical-space relevance, values in [0, 1]
    raw_mean: np.ndarray   # average of warped maps before the final normalization
    count: int
    provenance: dict = field(default_factory=dict)


def aggregate_global(
    items: Iterable[tuple[np.ndarray, np.ndarray]],
    template: CanonicalTemplate,
    provenance: dict | None = None,
    jobs: int = 1,
) -> GlobalHeatmap:
    """Average explanations in canonical space.

    Each item is (relevance map, landmarks in the map's coordinates); the
    map is min-max normalized, warped through the landmark similarity to
    the template, and averaged. Per-item work may fan out over `jobs`
    workers; the mean accumulates in item order either way, so the result
    is bit-identical for any worker count.
    """
    items = list(items)
    if not items:
        raise AtlasError("cannot aggregate an empty explanation set")

    def canonical(item: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
        expl, points = item
        pts = validate_landmarks(points)
        transform = fit_similarity(pts, template.points)
        return warp_explanation(normalize_relevance(expl), transform, template.side)

    if jobs <= 1:
        warped = [canonical(item) for item in items]
    else:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            warped = list(pool.map(canonical, items))
    acc = np.zeros((template.side, template.side))
    for w in warped:
        acc += w
    count = len(items)
    raw_mean = acc / count
    prov = dict(provenance or {})
    prov.setdefault("count", count)
    return GlobalHeatmap(map=normalize_relevance(raw_mean), raw_mean=raw_mean,
                         count=count, provenance=prov)
