"""SLIC superpixels: k-means in combined CIELAB + position space.

Produces the interpretable regions that the occlusion explainer
perturbs. Follows the classic SLIC recipe: grid-seeded cluster centers,
iterative assignment limited to a 2S x 2S window per center with the
color/space tradeoff set by `compactness`, then a connectivity pass that
merges stray components into their largest neighbour so every region is
4-connected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import ensure_image

# D65 reference white, sRGB primaries.
_SRGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ]
)
_WHITE_D65 = np.array([0.95047, 1.0, 1.08883])


class SegmentationError(ValueError):
    pass


def rgb_to_lab(img: np.ndarray) -> np.ndarray:
    """Convert an sRGB image in [0, 1] to CIELAB (D65 white point)."""
    img = ensure_image(img)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    linear = np.where(img <= 0.04045, img / 12.92, ((img + 0.055) / 1.055) ** 2.4)
    xyz = linear @ _SRGB_TO_XYZ.T
    t = xyz / _WHITE_D65
    delta = 6.0 / 29.0
    f = np.where(t > delta**3, np.cbrt(t), t / (3 * delta**2) + 4.0 / 29.0)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


@dataclass
class SegmentationMap:
    labels: np.ndarray    # (H, W) int32, values in [0, region_count)
    region_count: int

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


def _seed_grid(w: int, h: int, target: int) -> np.ndarray:
    """Cluster seeds on a near-square grid of about `target` cells, (y, x) rows."""
    ny = max(1, round(np.sqrt(target * h / w)))
    nx = max(1, round(target / ny))
    ys = (np.arange(ny) + 0.5) * h / ny
    xs = (np.arange(nx) + 0.5) * w / nx
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([gy.ravel(), gx.ravel()], axis=1)


def slic(
    img: np.ndarray,
    target_regions: int = 30,
    compactness: float = 10.0,
    iterations: int = 10,
    seed: int = 0,
) -> SegmentationMap:
    """Segment an image into approximately `target_regions` superpixels.

    The 5D distance between a pixel and a center is
    d_lab^2 + (compactness / S)^2 * d_xy^2 with S = sqrt(W*H / target);
    assignment ties resolve to the lowest center id, which also makes the
    result independent of any parallel scheduling. The algorithm is fully
    deterministic; `seed` is accepted for provenance symmetry with the
    samplers.
    """
    del seed
    img = ensure_image(img)
    h, w = img.shape[:2]
    if target_regions < 1:
        raise SegmentationError("target_regions must be >= 1")
    if target_regions > h * w:
        raise SegmentationError(f"target_regions={target_regions} exceeds pixel count {h * w}")

    lab = rgb_to_lab(img)
    step = np.sqrt(w * h / target_regions)
    ratio2 = (compactness / step) ** 2

    seeds = _seed_grid(w, h, target_regions)
    n_centers = len(seeds)
    centers_xy = seeds.copy()
    iy = np.clip(np.round(seeds[:, 0]).astype(int), 0, h - 1)
    ix = np.clip(np.round(seeds[:, 1]).astype(int), 0, w - 1)
    centers_lab = lab[iy, ix].copy()

    grid_y, grid_x = np.meshgrid(np.arange(h, dtype=np.float64),
                                 np.arange(w, dtype=np.float64), indexing="ij")
    labels = np.zeros((h, w), dtype=np.int32)

    for _ in range(iterations):
        best = np.full((h, w), np.inf)
        labels.fill(-1)
        for cid in range(n_centers):
            cy, cx = centers_xy[cid]
            y0 = max(0, int(np.floor(cy - step)))
            y1 = min(h, int(np.ceil(cy + step)) + 1)
            x0 = max(0, int(np.floor(cx - step)))
            x1 = min(w, int(np.ceil(cx + step)) + 1)
            if y0 >= y1 or x0 >= x1:
                continue
            dlab = lab[y0:y1, x0:x1] - centers_lab[cid]
            d2 = np.einsum("ijk,ijk->ij", dlab, dlab)
            d2 = d2 + ratio2 * ((grid_y[y0:y1, x0:x1] - cy) ** 2
                                + (grid_x[y0:y1, x0:x1] - cx) ** 2)
            win_best = best[y0:y1, x0:x1]
            upd = d2 < win_best
            win_best[upd] = d2[upd]
            labels[y0:y1, x0:x1][upd] = cid

        # Pixels no window reached go to the nearest center by full 5D distance.
        missed = labels < 0
        if missed.any():
            my, mx = np.nonzero(missed)
            dlab = lab[my, mx][:, None, :] - centers_lab[None, :, :]
            d2 = np.einsum("pck,pck->pc", dlab, dlab)
            d2 += ratio2 * ((my[:, None] - centers_xy[None, :, 0]) ** 2
                            + (mx[:, None] - centers_xy[None, :, 1]) ** 2)
            labels[my, mx] = np.argmin(d2, axis=1)

        flat = labels.ravel()
        counts = np.bincount(flat, minlength=n_centers).astype(np.float64)
        sum_y = np.bincount(flat, weights=grid_y.ravel(), minlength=n_centers)
        sum_x = np.bincount(flat, weights=grid_x.ravel(), minlength=n_centers)
        nonzero = counts > 0
        centers_xy[nonzero, 0] = sum_y[nonzero] / counts[nonzero]
        centers_xy[nonzero, 1] = sum_x[nonzero] / counts[nonzero]
        for k in range(3):
            sums = np.bincount(flat, weights=lab[..., k].ravel(), minlength=n_centers)
            centers_lab[nonzero, k] = sums[nonzero] / counts[nonzero]

    labels = _enforce_connectivity(labels)
    count = int(labels.max()) + 1
    lo, hi = 0.6 * target_regions, 1.4 * target_regions
    if not (lo <= count <= hi):
        raise SegmentationError(
            f"achieved region count {count} outside [{lo:.1f}, {hi:.1f}] for target {target_regions}"
        )
    return SegmentationMap(labels=labels, region_count=count)


def _connected_components(labels: np.ndarray) -> tuple[np.ndarray, int]:
    """4-connected components of equal-label pixels, numbered label-major."""
    from scipy import ndimage

    comp = np.full(labels.shape, -1, dtype=np.int32)
    n_comp = 0
    for lbl in np.unique(labels):
        part, n = ndimage.label(labels == lbl, structure=[[0, 1, 0], [1, 1, 1], [0, 1, 0]])
        comp[part > 0] = part[part > 0] - 1 + n_comp
        n_comp += n
    return comp, n_comp


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Merge orphan components into the largest adjacent region, relabel 0..R-1."""
    h, w = labels.shape
    comp, n_comp = _connected_components(labels)
    comp_sizes = np.bincount(comp.ravel(), minlength=n_comp)
    comp_label = np.full(n_comp, -1, dtype=np.int64)
    comp_label[comp.ravel()] = labels.ravel()

    # The largest component of each label is its keeper; lowest id wins ties.
    keep = np.zeros(n_comp, dtype=bool)
    keeper: dict[int, int] = {}
    for c in range(n_comp):
        lbl = int(comp_label[c])
        if lbl not in keeper or comp_sizes[c] > comp_sizes[keeper[lbl]]:
            keeper[lbl] = c
    keep[list(keeper.values())] = True

    out = labels.copy()
    orphans = [c for c in range(n_comp) if not keep[c]]
    # Orphans surrounded only by other orphans resolve on a later sweep;
    # every sweep settles at least the ones touching a kept component.
    while orphans:
        deferred = []
        for c in orphans:
            ys, xs = np.nonzero(comp == c)
            votes: dict[int, int] = {}
            for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                ny = ys + dy
                nx = xs + dx
                ok = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
                ncomp = comp[ny[ok], nx[ok]]
                settled = keep[ncomp]
                for lbl in out[ny[ok], nx[ok]][settled]:
                    votes[int(lbl)] = votes.get(int(lbl), 0) + 1
            if not votes:
                deferred.append(c)
                continue
            sizes = np.bincount(out.ravel())
            target = max(sorted(votes), key=lambda l: sizes[l])
            out[ys, xs] = target
            keep[c] = True
        if len(deferred) == len(orphans):  # defensive; cannot happen for a partition
            break
        orphans = deferred

    _, inv = np.unique(out, return_inverse=True)
    return inv.reshape(h, w).astype(np.int32)


def region_mask(seg: SegmentationMap, region: int) -> np.ndarray:
    """Boolean mask of the pixels carrying `region`'s label."""
    if not 0 <= region < seg.region_count:
        raise SegmentationError(f"region id {region} out of range [0, {seg.region_count})")
    return seg.labels == region


def boundary_overlay(img: np.ndarray, seg: SegmentationMap,
                     color: tuple[float, float, float] = (1.0, 0.0, 0.0)) -> np.ndarray:
    """Debug rendering: region boundaries painted over the image."""
    img = ensure_image(img)
    if img.ndim == 2:
        img = np.stack([img] * 3, axis=-1)
    out = img.copy()
    lbl = seg.labels
    edge = np.zeros(lbl.shape, dtype=bool)
    edge[:, :-1] |= lbl[:, :-1] != lbl[:, 1:]
    edge[:-1, :] |= lbl[:-1, :] != lbl[1:, :]
    out[edge] = color
    return out
