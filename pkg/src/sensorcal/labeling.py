"""Semi-automatic range labeling.

LiDAR clouds are cropped around a seed, the board plane is found with RANSAC,
and the left- and rightmost inliers of every scan ring become boundary
labels. Depth images are labeled by growing a 4-connected region from a seed
pixel. Seeds come from a config document or are tracked from the previous
collection's centroid.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .dataset import Collection, Dataset, RangeDetection

log = logging.getLogger(__name__)

DEGENERATE_TOL = 1e-9
MAX_REDRAWS = 100


class LabelingError(ValueError):
    pass


@dataclass(frozen=True)
class LidarLabelConfig:
    seed: tuple = (0.0, 0.0, 0.0)  # sensor frame, meters
    crop_radius: float = 0.8
    ransac_threshold: float = 0.03
    ransac_iters: int = 200
    min_inliers: int = 20
    random_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "seed", tuple(float(v) for v in self.seed))
        if len(self.seed) != 3:
            raise ValueError("lidar seed must be a 3-vector")
        if self.crop_radius <= 0:
            raise ValueError("crop_radius must be positive")
        if self.ransac_threshold <= 0:
            raise ValueError("ransac_threshold must be positive")
        if self.ransac_iters < 1:
            raise ValueError("ransac_iters must be at least 1")


@dataclass(frozen=True)
class DepthLabelConfig:
    seed_pixel: tuple = (0, 0)
    depth_jump: float = 0.02
    max_inside_points: int = 500
    polygon: Optional[tuple] = None  # ((x, y), ...) pixel vertices

    def __post_init__(self):
        object.__setattr__(self, "seed_pixel", tuple(int(round(float(v))) for v in self.seed_pixel))
        if self.polygon is not None:
            object.__setattr__(self, "polygon", tuple(tuple(float(c) for c in p) for p in self.polygon))
            if len(self.polygon) < 3:
                raise ValueError("polygon needs at least 3 vertices")
        if self.depth_jump <= 0:
            raise ValueError("depth_jump must be positive")
        if self.max_inside_points < 4:
            raise ValueError("max_inside_points must be at least 4")


# ----------------------------------------------------------------------------
# LiDAR


def crop_sphere(points: np.ndarray, center, radius: float) -> np.ndarray:
    """Indices of the points within ``radius`` of ``center``."""
    d = points[:, :3] - np.asarray(center, dtype=float)
    return np.flatnonzero((d * d).sum(axis=1) <= radius * radius)


def _plane_through(a, b, c) -> Optional[tuple[np.ndarray, float]]:
    n = np.cross(b - a, c - a)
    scale = np.linalg.norm(b - a) * np.linalg.norm(c - a)
    norm = np.linalg.norm(n)
    if scale == 0.0 or norm <= DEGENERATE_TOL * scale:
        return None
    n = n / norm
    return n, -float(n @ a)


def ransac_plane(points: np.ndarray, threshold: float, iters: int, rng: np.random.Generator):
    """Best plane by inlier count over ``iters`` 3-point hypotheses.

    Returns ``(inlier mask, (normal, offset))``; the earliest hypothesis wins
    ties. A degenerate (collinear) draw is redrawn instead of spending an
    iteration, up to ``MAX_REDRAWS`` times.
    """
    n = len(points)
    best_mask = np.zeros(n, dtype=bool)
    best_plane = None
    if n < 3:
        return best_mask, None
    best = -1
    for _ in range(iters):
        plane = None
        for _ in range(MAX_REDRAWS):
            i, j, k = rng.choice(n, size=3, replace=False)
            plane = _plane_through(points[i], points[j], points[k])
            if plane is not None:
                break
        if plane is None:
            continue
        normal, offset = plane
        mask = np.abs(points @ normal + offset) <= threshold
        count = int(mask.sum())
        if count > best:
            best, best_mask, best_plane = count, mask, plane
    return best_mask, best_plane


def ring_boundary(points: np.ndarray, rings: np.ndarray) -> np.ndarray:
    """Indices of the min- and max-azimuth point of each ring.

    Azimuth is atan2(y, x) in the sensor frame, taken relative to the
    circular mean of the ring so that a board straddling +-pi stays contiguous.
    """
    out = []
    for r in np.unique(rings):
        sel = np.flatnonzero(rings == r)
        a = np.arctan2(points[sel, 1], points[sel, 0])
        ref = math.atan2(np.sin(a).mean(), np.cos(a).mean())
        rel = np.angle(np.exp(1j * (a - ref)))
        lo, hi = sel[int(np.argmin(rel))], sel[int(np.argmax(rel))]
        out.append(lo)
        if hi != lo:
            out.append(hi)
    return np.array(sorted(out), dtype=np.int64)


def label_lidar(cloud: np.ndarray, cfg: LidarLabelConfig) -> Optional[RangeDetection]:
    """Board labels from an (N, 4) cloud of (x, y, z, ring). None when nothing plane-like is found."""
    cloud = np.asarray(cloud, dtype=float)
    if cloud.ndim != 2 or cloud.shape[1] < 4:
        raise LabelingError("cloud must be (N, 4) rows of x, y, z, ring")
    if len(cloud) == 0:
        raise LabelingError("empty cloud")
    crop = crop_sphere(cloud, cfg.seed, cfg.crop_radius)
    if len(crop) < 3:
        return None
    pts = cloud[crop, :3]
    rng = np.random.default_rng(cfg.random_seed)
    mask, _ = ransac_plane(pts, cfg.ransac_threshold, cfg.ransac_iters, rng)
    if mask.sum() < max(cfg.min_inliers, 3):
        return None
    inliers = pts[mask]
    rings = cloud[crop[mask], 3]
    return RangeDetection(inliers, inliers[ring_boundary(inliers, rings)])


# ----------------------------------------------------------------------------
# depth


def points_in_polygon(xy: np.ndarray, polygon) -> np.ndarray:
    """Even-odd rule. Points exactly on an edge may fall either way."""
    poly = np.asarray(polygon, dtype=float)
    x, y = xy[:, 0], xy[:, 1]
    inside = np.zeros(len(xy), dtype=bool)
    for (x1, y1), (x2, y2) in zip(poly, np.roll(poly, -1, axis=0)):
        crosses = (y1 > y) != (y2 > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (x < xc)
    return inside


def fill_region(img: np.ndarray, seed, depth_jump: float, allowed: Optional[np.ndarray] = None) -> np.ndarray:
    """Boolean mask of the 4-connected region reachable from ``seed`` = (x, y).

    Two neighbouring pixels are linked when both depths are finite, they
    differ by at most ``depth_jump`` and both are allowed. The region is the
    connected component of the seed, so it does not depend on visit order.
    """
    h, w = img.shape
    ok = np.isfinite(img)
    if allowed is not None:
        ok &= allowed
    idx = np.arange(h * w).reshape(h, w)
    with np.errstate(invalid="ignore"):
        right = ok[:, :-1] & ok[:, 1:] & (np.abs(img[:, 1:] - img[:, :-1]) <= depth_jump)
        down = ok[:-1, :] & ok[1:, :] & (np.abs(img[1:, :] - img[:-1, :]) <= depth_jump)
    a = np.concatenate([idx[:, :-1][right], idx[:-1, :][down]])
    b = np.concatenate([idx[:, 1:][right], idx[1:, :][down]])
    graph = sp.coo_matrix((np.ones(len(a), dtype=np.int8), (a, b)), shape=(h * w, h * w))
    _, comp = connected_components(graph, directed=False)
    x, y = seed
    mask = comp.reshape(h, w) == comp[y * w + x]
    return mask


def region_boundary(mask: np.ndarray) -> np.ndarray:
    """Filled pixels with at least one unfilled 4-neighbour inside the image.

    The image border is not treated as a neighbour: a board cut off by the
    frame edge has no physical boundary there.
    """
    p = np.pad(mask, 1, mode="edge")
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return mask & ~interior


def _stride(n: int, cap: int) -> np.ndarray:
    if n <= cap:
        return np.arange(n)
    return np.arange(0, n, int(math.ceil(n / cap)))


def flood_fill_depth(img: np.ndarray, cfg: DepthLabelConfig) -> Optional[RangeDetection]:
    """Label the board in a depth image; rows are (x_pix, y_pix, depth)."""
    img = np.asarray(img, dtype=float)
    h, w = img.shape
    x, y = cfg.seed_pixel
    if not (0 <= x < w and 0 <= y < h) or not np.isfinite(img[y, x]):
        raise LabelingError(f"seed pixel {cfg.seed_pixel} has no valid depth")
    allowed = None
    if cfg.polygon is not None:
        vv, uu = np.mgrid[0:h, 0:w]
        allowed = points_in_polygon(np.column_stack([uu.ravel(), vv.ravel()]).astype(float),
                                    cfg.polygon).reshape(h, w)
        if not allowed[y, x]:
            raise LabelingError(f"seed pixel {cfg.seed_pixel} lies outside the polygon")
    mask = fill_region(img, (x, y), cfg.depth_jump, allowed)
    if mask.sum() <= 1:
        return None

    def rows(m):
        vv, uu = np.nonzero(m)
        return np.column_stack([uu, vv, img[vv, uu]]).astype(float)

    inside = rows(mask)
    return RangeDetection(inside[_stride(len(inside), cfg.max_inside_points)], rows(region_boundary(mask)))


def track_seed(prev: RangeDetection, pixel: bool = False):
    """Next frame's seed: the centroid of the previous inside labels.

    With ``pixel`` the centroid is taken over (x, y) pixel coordinates and
    rounded to the nearest pixel.
    """
    if len(prev.inside) == 0:
        raise LabelingError("cannot track from an empty detection")
    if pixel:
        c = prev.inside[:, :2].mean(axis=0)
        return (int(round(c[0])), int(round(c[1])))
    return tuple(prev.inside.mean(axis=0))


# ----------------------------------------------------------------------------
# batch


@dataclass
class LabelSummary:
    labeled: dict = field(default_factory=dict)  # sensor id -> count
    missed: dict = field(default_factory=dict)
    tracked: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"labeled": dict(self.labeled), "missed": dict(self.missed), "tracked": dict(self.tracked)}


def _lookup(table: dict, sid: str, cid: int):
    per = table.get(sid, {})
    return per.get(str(cid), per.get(cid))


def label_dataset(dataset: Dataset, config: dict) -> tuple[Dataset, LabelSummary]:
    """Relabel every range sensor of ``dataset`` from its raw data.

    ``config`` keys: ``lidar`` and ``depth`` (label options), ``seeds``
    (sensor id -> collection id -> seed) and optionally ``polygons`` in the
    same layout for depth sensors. Collections without an explicit seed use
    the centroid of the previous detection of that sensor. RGB detections
    are kept as they are.
    """
    lidar_opts = dict(config.get("lidar", {}))
    depth_opts = dict(config.get("depth", {}))
    seeds = config.get("seeds", {})
    polygons = config.get("polygons", {})
    summary = LabelSummary()
    new_cols = {c.id: Collection(c.id, dict(c.detections), dict(c.raw), dict(c.limits)) for c in dataset.collections}
    for s in dataset.sensors:
        if s.modality == "rgb":
            continue
        summary.labeled[s.id] = summary.missed[s.id] = summary.tracked[s.id] = 0
        prev = None
        for c in sorted(dataset.collections, key=lambda c: c.id):
            col = new_cols[c.id]
            col.detections.pop(s.id, None)
            raw = dataset.load_raw(c.id, s.id)
            if raw is None:
                continue
            seed = _lookup(seeds, s.id, c.id)
            tracked = seed is None
            if tracked:
                if prev is None:
                    summary.missed[s.id] += 1
                    continue
                seed = track_seed(prev, pixel=s.modality == "depth")
                summary.tracked[s.id] += 1
            try:
                if s.modality == "lidar3d":
                    det = label_lidar(raw, LidarLabelConfig(seed=tuple(seed), **lidar_opts))
                else:
                    poly = _lookup(polygons, s.id, c.id)
                    det = flood_fill_depth(raw, DepthLabelConfig(seed_pixel=tuple(seed), polygon=poly, **depth_opts))
            except LabelingError as exc:
                if not tracked:
                    raise LabelingError(f"collection {c.id}, sensor {s.id}: {exc}") from None
                log.info("collection %d, sensor %s: tracked seed lost (%s)", c.id, s.id, exc)
                det = None
            if det is None:
                summary.missed[s.id] += 1
                prev = None
                continue
            col.detections[s.id] = det
            summary.labeled[s.id] += 1
            prev = det
    cols = [new_cols[c.id] for c in dataset.collections if new_cols[c.id].detections]
    meta = dict(dataset.meta)
    meta["labeling"] = {"config": config, "summary": summary.to_dict()}
    out = replace(dataset, collections=cols, meta=meta, raw_cache=dict(dataset.raw_cache))
    return out, summary
