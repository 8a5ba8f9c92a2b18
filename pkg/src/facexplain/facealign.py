"""Face alignment from 68-point landmarks.

Landmarks follow the 300-W ordering (jaw 0-16, brows 17-26, nose 27-35,
left eye 36-41, right eye 42-47, mouth 48-67) and are ingested from pts
sidecar files; no detector runs in-process. Alignment levels the eye
centroids, crops a landmark-driven square box, and resizes to the model
input side.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import ensure_image, rotation_matrix, sample_bilinear

log = logging.getLogger(__name__)

N_LANDMARKS = 68
LEFT_EYE = slice(36, 42)
RIGHT_EYE = slice(42, 48)
BROWS = slice(17, 27)
NOSE = slice(27, 36)
MOUTH = slice(48, 68)

FACE_PARTS = ("mouth", "eyes", "brow", "nose")


class LandmarkError(ValueError):
    """Malformed or degenerate landmark set."""


def validate_landmarks(points: np.ndarray) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if pts.shape != (N_LANDMARKS, 2):
        raise LandmarkError(f"expected {N_LANDMARKS} (x, y) points, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise LandmarkError("landmark coordinates must be finite")
    return pts


def parse_pts(path: str | Path) -> np.ndarray:
    """Parse an IBUG/300-W pts file into a (68, 2) float array.

    Expected layout: `version: 1`, `n_points: 68`, `{`, 68 `x y` lines,
    `}`. CRLF line endings and stray whitespace are tolerated.
    """
    text = Path(path).read_text()
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines or not lines[0].lower().startswith("version"):
        raise LandmarkError(f"{path}: missing pts version header")
    n_points = None
    i = 1
    while i < len(lines) and n_points is None:
        if lines[i].lower().startswith("n_points"):
            try:
                n_points = int(lines[i].split(":")[1])
            except (IndexError, ValueError) as exc:
                raise LandmarkError(f"{path}: bad n_points line {lines[i]!r}") from exc
        i += 1
    if n_points is None:
        raise LandmarkError(f"{path}: missing n_points header")
    if n_points != N_LANDMARKS:
        raise LandmarkError(f"{path}: expected n_points: 68, got {n_points}")
    if i >= len(lines) or lines[i] != "{":
        raise LandmarkError(f"{path}: expected '{{' after headers")
    body = lines[i + 1:]
    if len(body) < n_points + 1 or body[n_points] != "}":
        raise LandmarkError(f"{path}: expected {n_points} points followed by '}}'")
    pts = np.empty((n_points, 2), dtype=np.float64)
    for k in range(n_points):
        parts = body[k].split()
        if len(parts) != 2:
            raise LandmarkError(f"{path}: bad point line {body[k]!r}")
        pts[k] = (float(parts[0]), float(parts[1]))
    return validate_landmarks(pts)


def write_pts(path: str | Path, points: np.ndarray) -> None:
    pts = validate_landmarks(points)
    lines = ["version: 1", f"n_points: {N_LANDMARKS}", "{"]
    lines += [f"{x:.6f} {y:.6f}" for x, y in pts]
    lines.append("}")
    Path(path).write_text("\n".join(lines) + "\n")


def eye_centroids(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Geometric centroids of the left (36-41) and right (42-47) eye contours."""
    pts = validate_landmarks(points)
    left = pts[LEFT_EYE].mean(axis=0)
    right = pts[RIGHT_EYE].mean(axis=0)
    if np.hypot(*(right - left)) < 1e-9:
        raise LandmarkError("degenerate landmarks: eye centroids coincide")
    return left, right


@dataclass
class AlignmentResult:
    image: np.ndarray          # out_side x out_side, aligned face
    landmarks: np.ndarray      # (68, 2) in output coordinates
    angle: float               # eye-line angle theta, degrees (rotation applied: -theta)
    interocular: float         # eye centroid distance in input pixels


def align_face(
    img: np.ndarray,
    points: np.ndarray,
    out_side: int = 224,
    margin: float = 0.2,
    fill: float = 0.0,
) -> AlignmentResult:
    """Rotate, crop, and resize a face to a square of `out_side` pixels.

    The eye line is leveled by rotating by -theta about the eye midpoint
    (theta = atan2 of the centroid difference). The crop is the bounding
    box of the rotated landmarks expanded by `margin` per side, squared
    by extending the shorter axis symmetrically. Rotation, crop, and
    resize compose into a single bilinear resampling pass; landmarks go
    through the same map.
    """
    img = ensure_image(img)
    pts = validate_landmarks(points)
    h, w = img.shape[:2]
    if pts[:, 0].min() < 0 or pts[:, 1].min() < 0 or pts[:, 0].max() > w - 1 or pts[:, 1].max() > h - 1:
        log.warning("landmarks extend outside the %dx%d image", w, h)

    # All geometry happens relative to an integral anchor, so translating
    # image + landmarks by whole pixels shifts the crop exactly and leaves
    # every computed value bit-identical.
    anchor = np.round(pts[0]).astype(np.int64)
    work = pts - anchor
    left, right = eye_centroids(work)
    theta = math.degrees(math.atan2(right[1] - left[1], right[0] - left[0]))
    interocular = float(np.hypot(*(right - left)))
    mid = (left + right) / 2.0

    # Landmarks in the eye-leveled frame (origin still at the anchor).
    rot = rotation_matrix(-theta)
    rel = (work - mid) @ rot.T
    q = rel + mid

    x0f, y0f = rel.min(axis=0)
    x1f, y1f = rel.max(axis=0)
    bw, bh = x1f - x0f, y1f - y0f
    if bw <= 0 or bh <= 0:
        raise LandmarkError("degenerate landmarks: zero-extent bounding box")
    x0f -= margin * bw
    x1f += margin * bw
    y0f -= margin * bh
    y1f += margin * bh
    side = max(x1f - x0f, y1f - y0f)
    # Square up by extending the shorter axis symmetrically.
    cx = (x0f + x1f) / 2.0
    cy = (y0f + y1f) / 2.0
    x0 = int(round(cx - side / 2.0 + mid[0]))
    y0 = int(round(cy - side / 2.0 + mid[1]))
    side_px = max(int(round(side)) + 1, 2)

    if (x0 + anchor[0] >= w or y0 + anchor[1] >= h
            or x0 + anchor[0] + side_px <= 0 or y0 + anchor[1] + side_px <= 0):
        log.warning("crop box lies fully outside the image; output is fill-valued")

    # Sample the input at the composed map: output grid -> leveled frame -> input.
    step = (side_px - 1) / (out_side - 1) if out_side > 1 else 0.0
    js = np.arange(out_side, dtype=np.float64)
    qx = x0 + js * step
    qy = y0 + js * step
    grid_qy, grid_qx = np.meshgrid(qy, qx, indexing="ij")
    rot_back = rotation_matrix(theta)
    dx = grid_qx - mid[0]
    dy = grid_qy - mid[1]
    src_x = rot_back[0, 0] * dx + rot_back[0, 1] * dy + mid[0]
    src_y = rot_back[1, 0] * dx + rot_back[1, 1] * dy + mid[1]
    out = np.clip(sample_bilinear(img, src_y, src_x, fill=fill,
                                  origin=(int(anchor[0]), int(anchor[1]))), 0.0, 1.0)

    lm_out = (q - (x0, y0)) / step if step > 0 else np.zeros_like(q)
    return AlignmentResult(image=out, landmarks=lm_out, angle=theta, interocular=interocular)


def _ellipse(shape: tuple[int, int], center: np.ndarray, axis: np.ndarray,
             a: float, b: float) -> np.ndarray:
    """Filled ellipse with semi-axis `a` along `axis` (unit) and `b` across."""
    h, w = shape
    yy, xx = np.ogrid[:h, :w]
    dx = xx - center[0]
    dy = yy - center[1]
    u = dx * axis[0] + dy * axis[1]
    v = -dx * axis[1] + dy * axis[0]
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def part_masks(points: np.ndarray, shape: tuple[int, int]) -> dict[str, np.ndarray]:
    """Boolean masks over landmark-relative face parts, keyed by part name.

    Each part is a single ellipse aligned with the eye axis; centers and
    sizes derive from the landmarks and the interocular distance, so the
    masks follow the face under translation, rotation, and scale. Used to
    build classifier oracles whose saliency has a known, landmark-relative
    ground truth.
    """
    pts = validate_landmarks(points)
    left, right = eye_centroids(pts)
    d = float(np.hypot(*(right - left)))
    axis = (right - left) / d
    up = np.array([axis[1], -axis[0]])  # y grows downward
    eye_mid = (left + right) / 2.0
    brow_mid = pts[BROWS].mean(axis=0)
    masks = {
        "mouth": _ellipse(shape, pts[MOUTH].mean(axis=0), axis, 1.05 * d, 0.55 * d),
        "eyes": _ellipse(shape, eye_mid, axis, 1.05 * d, 0.55 * d),
        "brow": _ellipse(shape, brow_mid + 0.38 * d * up, axis, 1.05 * d, 0.55 * d),
        "nose": _ellipse(shape, pts[NOSE].mean(axis=0), axis, 0.30 * d, 0.30 * d),
    }
    for name, m in masks.items():
        if not m.any():
            raise LandmarkError(f"face part {name!r} lies outside the {shape} image")
    return masks
