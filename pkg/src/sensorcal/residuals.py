"""Sensor-to-pattern error terms for RGB, LiDAR and depth labels.

Every term compares a sensor's labels against the board seen through
``sensor_T_pattern`` for that collection. Residuals are returned unsquared;
the least-squares cost squares them.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .dataset import Dataset, RangeDetection, RgbDetection
from .geometry import RigidTransform, TransformTree, pattern_frame_name
from .sensors import (
    CameraIntrinsics,
    PatternSpec,
    backproject_depth_points,
    boundary_samples,
    corner_points,
    project_points,
)

KINDS = ("rgb_reprojection", "range_orthogonal", "range_longitudinal")
DEFAULT_WEIGHTS = {"rgb": 1.0, "range": 100.0}
KIND_WEIGHT_KEY = {"rgb_reprojection": "rgb", "range_orthogonal": "range", "range_longitudinal": "range"}


@dataclass
class ResidualBlock:
    collection: int
    sensor: str
    kind: str
    values: np.ndarray
    valid: Optional[np.ndarray] = None  # False where a term was excluded (value forced to 0)

    @property
    def n_invalid(self) -> int:
        return 0 if self.valid is None else int((~self.valid).sum())


def rgb_residual(det: RgbDetection, T_sp: RigidTransform, intr: CameraIntrinsics, spec: PatternSpec,
                 collection: int = -1, sensor: str = "") -> ResidualBlock:
    """Pixel distance between each detected corner and its projection.

    Corners that land behind the camera are excluded: their entry is 0 and
    flagged in ``valid``.
    """
    pts = T_sp.apply(corner_points(spec)[det.ids])
    uv, valid = project_points(intr, pts)
    values = np.linalg.norm(det.uv - uv, axis=1)
    values[~valid] = 0.0
    return ResidualBlock(collection, sensor, "rgb_reprojection", values, valid)


def _to_3d(points, intr: Optional[CameraIntrinsics]) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    return pts if intr is None else backproject_depth_points(intr, pts)


def range_orthogonal(points, T_sp: RigidTransform, intr: Optional[CameraIntrinsics] = None,
                     collection: int = -1, sensor: str = "") -> ResidualBlock:
    """Signed distance of each inside point to the board plane.

    With ``intr`` the rows are (x_pix, y_pix, depth) and are lifted to 3D first.
    """
    p = T_sp.inverse().apply(_to_3d(points, intr))
    return ResidualBlock(collection, sensor, "range_orthogonal", p[:, 2].copy())


@lru_cache(maxsize=32)
def perimeter_segments(spec: PatternSpec) -> tuple[np.ndarray, np.ndarray]:
    """Closed polyline through the boundary samples, collinear runs merged."""
    q = boundary_samples(spec)[:, :2]
    keep = []
    n = len(q)
    for i in range(n):
        a, b, c = q[i - 1], q[i], q[(i + 1) % n]
        cross = (b[0] - a[0]) * (c[1] - b[1]) - (b[1] - a[1]) * (c[0] - b[0])
        if abs(cross) > 1e-12:
            keep.append(i)
    v = q[keep]
    return v, np.roll(v, -1, axis=0)


@lru_cache(maxsize=32)
def _sample_tree(spec: PatternSpec) -> cKDTree:
    return cKDTree(boundary_samples(spec)[:, :2])


def closest_on_perimeter(xy: np.ndarray, spec: PatternSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distance, closest perimeter point and outward normal of the closest side."""
    a, b = perimeter_segments(spec)
    ab = b - a
    ap = xy[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    off = ap - t[..., None] * ab
    d2 = (off * off).sum(-1)
    k = d2.argmin(axis=1)
    rows = np.arange(len(xy))
    closest = a[k] + t[rows, k, None] * ab[k]
    # polygon is counter-clockwise, so the outward normal is the edge direction turned clockwise
    normal = np.column_stack([ab[k, 1], -ab[k, 0]])
    normal /= np.linalg.norm(normal, axis=1, keepdims=True)
    return np.sqrt(d2[rows, k]), closest, normal


def distance_to_perimeter(xy: np.ndarray, spec: PatternSpec) -> np.ndarray:
    return closest_on_perimeter(xy, spec)[0]


def distance_to_samples(xy: np.ndarray, spec: PatternSpec) -> np.ndarray:
    d, _ = _sample_tree(spec).query(xy)
    return np.asarray(d, dtype=float)


def range_longitudinal(points, T_sp: RigidTransform, spec: PatternSpec, intr: Optional[CameraIntrinsics] = None,
                       collection: int = -1, sensor: str = "", mode: str = "polyline") -> ResidualBlock:
    """In-plane (XY) distance from each boundary point to the board perimeter samples.

    ``mode="polyline"`` measures against the closed polyline through the
    perimeter samples, so a point exactly on the physical edge scores 0.
    ``mode="samples"`` takes the nearest discrete sample only.
    """
    p = T_sp.inverse().apply(_to_3d(points, intr))
    xy = p[:, :2]
    if mode == "polyline":
        values = distance_to_perimeter(xy, spec)
    elif mode == "samples":
        values = distance_to_samples(xy, spec)
    else:
        raise ValueError(f"unknown longitudinal mode {mode!r}")
    return ResidualBlock(collection, sensor, "range_longitudinal", values)


def sensor_blocks(det, sensor, T_sp: RigidTransform, spec: PatternSpec, collection: int = -1,
                  mode: str = "polyline") -> list[ResidualBlock]:
    if det is None:
        return []
    if sensor.modality == "rgb":
        return [rgb_residual(det, T_sp, sensor.intrinsics, spec, collection, sensor.id)]
    intr = sensor.intrinsics if sensor.modality == "depth" else None
    return [
        range_orthogonal(det.inside, T_sp, intr, collection, sensor.id),
        range_longitudinal(det.boundary, T_sp, spec, intr, collection, sensor.id, mode),
    ]


def assemble_blocks(dataset: Dataset, tree: TransformTree, mode: str = "polyline") -> list[ResidualBlock]:
    """All residual blocks, ordered by (collection id, sensor id, kind)."""
    blocks = []
    sensors = sorted(dataset.sensors, key=lambda s: s.id)
    world_T_sensor = {s.id: tree.chain_to(s.data_frame) for s in sensors}
    for c in sorted(dataset.collections, key=lambda c: c.id):
        pframe = pattern_frame_name(c.id)
        if not tree.has_frame(pframe):
            continue
        world_T_pattern = tree.chain_to(pframe)
        for s in sensors:
            det = c.detections.get(s.id)
            if det is None:
                continue
            T_sp = world_T_sensor[s.id].inverse() @ world_T_pattern
            blocks.extend(sensor_blocks(det, s, T_sp, dataset.pattern, c.id, mode))
    return blocks


def assemble(dataset: Dataset, tree: TransformTree, weights: Optional[dict] = None,
             mode: str = "polyline") -> np.ndarray:
    """Concatenated residual vector; ``weights`` keyed by 'rgb' / 'range' scale each kind."""
    blocks = assemble_blocks(dataset, tree, mode)
    if not blocks:
        return np.zeros(0)
    w = {"rgb": 1.0, "range": 1.0} if weights is None else {**DEFAULT_WEIGHTS, **weights}
    return np.concatenate([w[KIND_WEIGHT_KEY[b.kind]] * b.values for b in blocks])


def cost(residuals: np.ndarray) -> float:
    return float(residuals @ residuals)
