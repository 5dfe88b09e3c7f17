"""Synthetic collaborative cell with known ground truth.

Generates datasets in the on-disk format together with every true transform,
so that calibration results can be scored exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .dataset import (
    Collection,
    Dataset,
    RangeDetection,
    RgbDetection,
    SensorSpec,
    check_sensor_chain,
    dataset_stats,
    min_corners,
    tree_from_doc,
    tree_to_doc,
)
from .geometry import RigidTransform, TransformTree, exp_so3, look_at, pattern_frame_name
from .sensors import (
    CameraIntrinsics,
    PatternSpec,
    corner_points,
    project_points,
    sample_perimeter,
)

log = logging.getLogger(__name__)

CELL_DIMS = (4.0, 2.8, 2.29)


@dataclass(frozen=True)
class LidarModel:
    rings: int = 16
    elevation_min: float = math.radians(-15.0)
    elevation_max: float = math.radians(15.0)
    azimuth_step: float = math.radians(0.4)
    max_range: float = 30.0

    def __post_init__(self):
        if self.rings < 4:
            raise ValueError("lidar model needs at least 4 rings")
        if self.azimuth_step <= 0:
            raise ValueError("azimuth step must be positive")

    @property
    def elevations(self) -> np.ndarray:
        return np.linspace(self.elevation_min, self.elevation_max, self.rings)

    @property
    def n_azimuth(self) -> int:
        return int(round(2 * math.pi / self.azimuth_step))


@dataclass(frozen=True)
class NoiseModel:
    rgb_pixel_sigma: float = 0.5
    range_sigma: float = 0.008
    depth_sigma: float = 0.004

    def __post_init__(self):
        if min(self.rgb_pixel_sigma, self.range_sigma, self.depth_sigma) < 0:
            raise ValueError("noise sigmas must be non-negative")

    @classmethod
    def none(cls) -> "NoiseModel":
        return cls(0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Visibility:
    """Detection rules of the simulated sensors."""

    lidar_min_points: int = 20
    lidar_min_rings: int = 2
    lidar_full_board: bool = True  # the whole board must sit inside the vertical field of view
    depth_min_fraction: float = 0.3
    depth_max_inside: int = 500
    depth_boundary_step: float = 0.02
    max_view_angle: float = math.radians(75.0)
    min_range: float = 0.3
    depth_max_range: float = 6.0
    limits_step: float = 0.005


@dataclass
class SceneConfig:
    tree: TransformTree  # ground-truth sensor tree
    sensors: list
    pattern: PatternSpec
    trajectory: list  # world_T_pattern per collection
    noise: NoiseModel = field(default_factory=NoiseModel)
    lidar: LidarModel = field(default_factory=LidarModel)
    visibility: Visibility = field(default_factory=Visibility)
    cell_dims: tuple = CELL_DIMS
    seed: int = 0
    first_collection_id: int = 0


@dataclass
class GroundTruth:
    tree: TransformTree  # sensors only
    pattern_poses: dict  # collection id -> world_T_pattern
    manifest: dict

    def full_tree(self, collections=None) -> TransformTree:
        t = self.tree.copy()
        for cid, T in sorted(self.pattern_poses.items()):
            if collections is None or cid in collections:
                t.add_edge(t.root, pattern_frame_name(cid), T, "pattern")
        return t

    def to_doc(self) -> dict:
        return {
            "tree": tree_to_doc(self.tree),
            "pattern_poses": {
                str(cid): {"rotation": T.rotation.tolist(), "translation": T.translation.tolist()}
                for cid, T in sorted(self.pattern_poses.items())
            },
            "manifest": self.manifest,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "GroundTruth":
        poses = {int(k): RigidTransform(np.array(v["rotation"]), np.array(v["translation"]))
                 for k, v in doc["pattern_poses"].items()}
        return cls(tree_from_doc(doc["tree"]), poses, dict(doc.get("manifest", {})))


# ----------------------------------------------------------------------------
# default cell


def default_pattern() -> PatternSpec:
    return PatternSpec(nx=11, ny=8, square=0.08, border_width=0.05, border_height=0.05, boundary_sample_step=0.01)


def default_rgb_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(600.0, 600.0, 320.0, 240.0, 640, 480)


def default_depth_intrinsics() -> CameraIntrinsics:
    return CameraIntrinsics(525.0, 525.0, 319.5, 239.5, 640, 480)


# link frame (x forward, z up) -> optical frame (z forward, x right, y down)
LINK_T_OPTICAL = RigidTransform(np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]]), np.zeros(3))


def _lidar_pose(position, yaw, pitch=0.0, roll=0.0) -> RigidTransform:
    R = exp_so3([0, 0, yaw]) @ exp_so3([0, pitch, 0]) @ exp_so3([roll, 0, 0])
    return RigidTransform(R, position)


def default_cell() -> tuple[TransformTree, list, PatternSpec]:
    """Gantry cell with three LiDARs, one depth camera and three RGB cameras.

    Returns the ground-truth tree (calibrated edges marked ``optimized``), the
    sensor list and the board.
    """
    tree = TransformTree("world")
    tree.add_edge("world", "gantry", RigidTransform(np.eye(3), [0.0, -1.25, 2.2]))
    tree.add_edge("gantry", "big_beam", RigidTransform(exp_so3([0, 0, 0.02]), [0.0, 0.0, 0.0]))
    tree.add_edge("big_beam", "small_beam_1", RigidTransform(np.eye(3), [-1.1, 0.0, -0.05]))
    tree.add_edge("big_beam", "small_beam_2", RigidTransform(np.eye(3), [1.1, 0.0, -0.05]))
    tree.add_edge("world", "lidar_1_post", RigidTransform(np.eye(3), [1.75, -1.2, 0.0]))
    tree.add_edge("world", "lidar_3_post", RigidTransform(np.eye(3), [-1.75, -1.2, 0.0]))

    def attach(parent, child, world_pose, post=None):
        # edge such that chain(parent) * edge * post = world_pose
        T = tree.chain_to(parent).inverse() @ world_pose
        if post is not None:
            T = T @ post.inverse()
        tree.add_edge(parent, child, T, "optimized")

    cams = {
        "rgb_1": ((-1.3, -1.25, 2.1), (-0.8, 0.2, 1.0)),
        "rgb_2": ((1.3, -1.25, 2.1), (0.85, 0.2, 1.0)),
        "rgb_3": ((0.0, -1.3, 2.15), (0.0, 0.3, 1.0)),
        "depth_1": ((0.35, -1.3, 2.15), (0.2, 0.3, 0.95)),
    }
    attach("small_beam_1", "rgb_1_link", look_at(*cams["rgb_1"]), LINK_T_OPTICAL)
    tree.add_edge("rgb_1_link", "rgb_1_optical", LINK_T_OPTICAL)
    attach("small_beam_2", "rgb_2_link", look_at(*cams["rgb_2"]), LINK_T_OPTICAL)
    tree.add_edge("rgb_2_link", "rgb_2_optical", LINK_T_OPTICAL)
    attach("big_beam", "rgb_3_optical", look_at(*cams["rgb_3"]))
    attach("big_beam", "depth_1_link", look_at(*cams["depth_1"]), LINK_T_OPTICAL)
    tree.add_edge("depth_1_link", "depth_1_optical", LINK_T_OPTICAL)

    attach("lidar_1_post", "lidar_1", _lidar_pose([1.75, -1.2, 1.2], math.radians(145), math.radians(-2)))
    attach("world", "lidar_2", _lidar_pose([0.0, -1.35, 1.0], math.radians(90), math.radians(-3), 0.01))
    attach("lidar_3_post", "lidar_3", _lidar_pose([-1.75, -1.2, 1.25], math.radians(35), math.radians(-2)))

    rgb, depth = default_rgb_intrinsics(), default_depth_intrinsics()
    sensors = [
        SensorSpec("lidar_1", "lidar3d", "lidar_1", ("lidar_1_post", "lidar_1")),
        SensorSpec("lidar_2", "lidar3d", "lidar_2", ("world", "lidar_2")),
        SensorSpec("lidar_3", "lidar3d", "lidar_3", ("lidar_3_post", "lidar_3")),
        SensorSpec("depth_1", "depth", "depth_1_optical", ("big_beam", "depth_1_link"), depth),
        SensorSpec("rgb_1", "rgb", "rgb_1_optical", ("small_beam_1", "rgb_1_link"), rgb),
        SensorSpec("rgb_2", "rgb", "rgb_2_optical", ("small_beam_2", "rgb_2_link"), rgb),
        SensorSpec("rgb_3", "rgb", "rgb_3_optical", ("big_beam", "rgb_3_optical"), rgb),
    ]
    for s in sensors:
        check_sensor_chain(tree, s)
    return tree, sensors, default_pattern()


# ----------------------------------------------------------------------------
# ray casting


def _board_in_sensor(world_T_sensor: RigidTransform, world_T_pattern: RigidTransform) -> RigidTransform:
    return world_T_sensor.inverse() @ world_T_pattern


def _ring_directions(elevation: float, azimuths: np.ndarray) -> np.ndarray:
    ce = math.cos(elevation)
    return np.column_stack([ce * np.cos(azimuths), ce * np.sin(azimuths), np.full(len(azimuths), math.sin(elevation))])


def _ray_hits(T_sb: RigidTransform, spec: PatternSpec, dirs: np.ndarray, max_range: float):
    """Intersect unit rays from the origin with the board. Returns (hit mask, range, board uv)."""
    n = T_sb.rotation[:, 2]
    o = T_sb.translation
    denom = dirs @ n
    num = float(n @ o)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(np.abs(denom) > 1e-12, num / denom, np.nan)
    X = t[:, None] * dirs
    uv = (X - o) @ T_sb.rotation[:, :2]
    x0, x1, y0, y1 = spec.extent
    hit = (
        np.isfinite(t) & (t > 0) & (t <= max_range)
        & (uv[:, 0] >= x0) & (uv[:, 0] <= x1) & (uv[:, 1] >= y0) & (uv[:, 1] <= y1)
    )
    return hit, t, uv


def _azimuth_window(T_sb: RigidTransform, spec: PatternSpec, model: LidarModel) -> np.ndarray:
    """Azimuth grid indices worth casting (all of them if the board wraps around the sensor)."""
    n_az = model.n_azimuth
    corners = T_sb.apply(spec.rectangle())
    az = np.arctan2(corners[:, 1], corners[:, 0])
    ref = math.atan2(np.sin(az).mean(), np.cos(az).mean())
    rel = np.angle(np.exp(1j * (az - ref)))
    if np.ptp(rel) > math.pi * 0.9 or np.linalg.norm(corners[:, :2], axis=1).min() < 1e-6:
        return np.arange(n_az)
    lo = int(math.floor((ref + rel.min()) / model.azimuth_step)) - 1
    hi = int(math.ceil((ref + rel.max()) / model.azimuth_step)) + 1
    return np.arange(lo, hi + 1) % n_az


def raycast_board(world_T_pattern: RigidTransform, world_T_sensor: RigidTransform, model: LidarModel,
                  spec: PatternSpec, edge_returns: bool = True) -> np.ndarray:
    """Noiseless LiDAR returns from the board, (N, 4) rows of (x, y, z, ring) in the sensor frame.

    Grid rays come from the (ring elevation x azimuth step) lattice. With
    ``edge_returns`` each contiguous run of hits in a ring is extended by the
    exact points where the beam sweep enters and leaves the board.
    """
    return _raycast(world_T_pattern, world_T_sensor, model, spec, edge_returns)[0]


def _raycast(world_T_pattern, world_T_sensor, model, spec, edge_returns):
    T_sb = _board_in_sensor(world_T_sensor, world_T_pattern)
    ks = _azimuth_window(T_sb, spec, model)
    az = ks * model.azimuth_step
    out = []
    n_grid = 0
    for ring, elev in enumerate(model.elevations):
        dirs = _ring_directions(elev, az)
        hit, t, _ = _ray_hits(T_sb, spec, dirs, model.max_range)
        if not hit.any():
            continue
        pts = t[hit, None] * dirs[hit]
        n_grid += len(pts)
        rows = [np.column_stack([pts, np.full(len(pts), ring)])]
        if edge_returns:
            edges = _edge_points(T_sb, spec, model, elev, ks, hit)
            if len(edges):
                rows.append(np.column_stack([edges, np.full(len(edges), ring)]))
        out.append(np.vstack(rows))
    if not out:
        return np.zeros((0, 4)), 0
    return np.vstack(out), n_grid


def board_in_vertical_fov(T_sb: RigidTransform, spec: PatternSpec, model: LidarModel) -> bool:
    c = T_sb.apply(spec.rectangle())
    elev = np.arctan2(c[:, 2], np.linalg.norm(c[:, :2], axis=1))
    return bool(elev.min() >= model.elevations.min() and elev.max() <= model.elevations.max())


def lidar_detects(grid_cloud_rings: np.ndarray, vis: "Visibility") -> bool:
    return len(grid_cloud_rings) >= vis.lidar_min_points and len(np.unique(grid_cloud_rings)) >= vis.lidar_min_rings


def _edge_points(T_sb, spec, model, elev, ks, hit) -> np.ndarray:
    n_az = model.n_azimuth
    hit_set = {int(k) for k in ks[hit]}
    pts = []

    def inside(a):
        h, t, _ = _ray_hits(T_sb, spec, _ring_directions(elev, np.array([a])), model.max_range)
        return bool(h[0]), t[0]

    for k in sorted(hit_set):
        for step in (-1, 1):
            if (k + step) % n_az in hit_set:
                continue
            a_in = k * model.azimuth_step
            a_out = (k + step) * model.azimuth_step
            for _ in range(64):
                mid = 0.5 * (a_in + a_out)
                if mid == a_in or mid == a_out:
                    break
                if inside(mid)[0]:
                    a_in = mid
                else:
                    a_out = mid
            ok, t = inside(a_in)
            if ok:
                pts.append(t * _ring_directions(elev, np.array([a_in]))[0])
    return np.array(pts).reshape(-1, 3)


def ring_azimuth(points: np.ndarray) -> np.ndarray:
    """Azimuth of each point relative to the circular mean of the set (no wrap at +-pi)."""
    a = np.arctan2(points[:, 1], points[:, 0])
    ref = math.atan2(np.sin(a).mean(), np.cos(a).mean())
    return np.angle(np.exp(1j * (a - ref)))


def ring_extremes(points: np.ndarray, rings: np.ndarray) -> np.ndarray:
    """Indices of the min- and max-azimuth point of every ring."""
    idx = []
    for r in np.unique(rings):
        sel = np.flatnonzero(rings == r)
        az = ring_azimuth(points[sel])
        lo, hi = sel[int(np.argmin(az))], sel[int(np.argmax(az))]
        idx.append(lo)
        if hi != lo:
            idx.append(hi)
    return np.array(sorted(idx), dtype=np.int64)


# ----------------------------------------------------------------------------
# per-sensor observation


def _view_ok(T_sb: RigidTransform, vis: Visibility, require_front: bool) -> bool:
    n = T_sb.rotation[:, 2]
    c = T_sb.apply(np.array([0.0, 0.0, 0.0]))
    dist = float(np.linalg.norm(c))
    if dist < vis.min_range:
        return False
    # the sensor origin seen from the board: cos of angle between normal and view ray
    cosang = float(-(n @ c)) / dist
    if require_front:
        return cosang >= math.cos(vis.max_view_angle)
    return abs(cosang) >= math.cos(vis.max_view_angle)


def observe_rgb(sensor: SensorSpec, T_sb: RigidTransform, spec: PatternSpec, vis: Visibility):
    """Noiseless visible corners ``(ids, uv)`` or None when below threshold."""
    if not _view_ok(T_sb, vis, require_front=True):
        return None
    pts = T_sb.apply(corner_points(spec))
    uv, valid = project_points(sensor.intrinsics, pts)
    ok = valid & (pts[:, 2] > vis.min_range) & sensor.intrinsics.in_bounds(uv)
    if ok.sum() < min_corners(spec):
        return None
    ids = np.flatnonzero(ok)
    return ids, uv[ok]


def _depth_fraction(sensor, T_sb, spec, step=0.03) -> float:
    x0, x1, y0, y1 = spec.extent
    gx, gy = np.meshgrid(np.arange(x0, x1 + 1e-9, step), np.arange(y0, y1 + 1e-9, step))
    pts = T_sb.apply(np.column_stack([gx.ravel(), gy.ravel(), np.zeros(gx.size)]))
    uv, valid = project_points(replace(sensor.intrinsics, distortion=(0.0,) * 5), pts)
    return float((valid & sensor.intrinsics.in_bounds(uv)).mean())


def rasterize_depth(intr: CameraIntrinsics, T_sb: RigidTransform, spec: PatternSpec, max_range: float) -> np.ndarray:
    """Depth raster of the board alone (NaN elsewhere), pixel centers at integer coordinates."""
    img = np.full((intr.height, intr.width), np.nan)
    corners = T_sb.apply(spec.rectangle())
    if np.all(corners[:, 2] > 1e-6):
        u = intr.fx * corners[:, 0] / corners[:, 2] + intr.cx
        v = intr.fy * corners[:, 1] / corners[:, 2] + intr.cy
        u0, u1 = max(0, int(math.floor(u.min()))), min(intr.width - 1, int(math.ceil(u.max())))
        v0, v1 = max(0, int(math.floor(v.min()))), min(intr.height - 1, int(math.ceil(v.max())))
    else:
        u0, u1, v0, v1 = 0, intr.width - 1, 0, intr.height - 1
    if u1 < u0 or v1 < v0:
        return img
    vv, uu = np.mgrid[v0:v1 + 1, u0:u1 + 1]
    rays = np.column_stack([(uu.ravel() - intr.cx) / intr.fx, (vv.ravel() - intr.cy) / intr.fy, np.ones(uu.size)])
    n = T_sb.rotation[:, 2]
    o = T_sb.translation
    denom = rays @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        Z = np.where(np.abs(denom) > 1e-12, float(n @ o) / denom, np.nan)
    X = Z[:, None] * rays
    b = (X - o) @ T_sb.rotation[:, :2]
    x0, x1, y0, y1 = spec.extent
    ok = np.isfinite(Z) & (Z > 0) & (Z <= max_range) & (b[:, 0] >= x0) & (b[:, 0] <= x1) & (b[:, 1] >= y0) & (b[:, 1] <= y1)
    sub = img[v0:v1 + 1, u0:u1 + 1].reshape(-1)
    sub[ok] = Z[ok]
    img[v0:v1 + 1, u0:u1 + 1] = sub.reshape(vv.shape)
    return img


def stride_subsample(n: int, cap: int) -> np.ndarray:
    """Deterministic uniform subsample of ``range(n)`` to at most ``cap`` indices."""
    if n <= cap:
        return np.arange(n)
    stride = int(math.ceil(n / cap))
    return np.arange(0, n, stride)


def projected_limits(intr: CameraIntrinsics, T_sb: RigidTransform, spec: PatternSpec, step: float) -> Optional[np.ndarray]:
    pts = T_sb.apply(sample_perimeter(spec, step))
    uv, valid = project_points(intr, pts)
    if not valid.all():
        return None
    return np.vstack([uv, uv[:1]])


@dataclass
class Observation:
    detection: object = None
    raw: Optional[np.ndarray] = None
    limits: Optional[np.ndarray] = None


def observe(sensor: SensorSpec, world_T_sensor: RigidTransform, world_T_pattern: RigidTransform,
            cfg: SceneConfig, rng: Optional[np.random.Generator], quick: bool = False) -> Observation:
    """Simulate one sensor looking at the board. ``rng=None`` means noiseless.

    ``quick`` only decides whether the board is detected; labels are placeholders.
    """
    spec, vis, noise = cfg.pattern, cfg.visibility, cfg.noise
    T_sb = _board_in_sensor(world_T_sensor, world_T_pattern)
    obs = Observation()
    if sensor.modality == "rgb":
        seen = observe_rgb(sensor, T_sb, spec, vis)
        if seen is None:
            return obs
        ids, uv = seen
        if rng is not None and noise.rgb_pixel_sigma > 0:
            uv = uv + rng.normal(0.0, noise.rgb_pixel_sigma, uv.shape)
        obs.detection = RgbDetection(ids, uv, partial=len(ids) < spec.n_corners)
        obs.limits = projected_limits(sensor.intrinsics, T_sb, spec, vis.limits_step)
        return obs

    if sensor.modality == "lidar3d":
        if not _view_ok(T_sb, vis, require_front=False):
            return obs
        if vis.lidar_full_board and not board_in_vertical_fov(T_sb, spec, cfg.lidar):
            return obs
        grid = raycast_board(world_T_pattern, world_T_sensor, cfg.lidar, spec, edge_returns=False)
        if quick and not lidar_detects(grid[:, 3], vis):
            return obs
        if len(grid) == 0:
            return obs
        if quick:
            obs.detection = RangeDetection(grid[:, :3], grid[:2, :3])
            return obs
        cloud = raycast_board(world_T_pattern, world_T_sensor, cfg.lidar, spec)
        if rng is not None and noise.range_sigma > 0:
            d = cloud[:, :3] / np.linalg.norm(cloud[:, :3], axis=1, keepdims=True)
            cloud = cloud.copy()
            cloud[:, :3] += rng.normal(0.0, noise.range_sigma, (len(cloud), 1)) * d
        obs.raw = cloud
        rings = cloud[:, 3]
        if not lidar_detects(grid[:, 3], vis):
            return obs
        b = ring_extremes(cloud[:, :3], rings)
        obs.detection = RangeDetection(cloud[:, :3], cloud[b, :3])
        return obs

    # depth
    intr = sensor.intrinsics
    if not _view_ok(T_sb, vis, require_front=False):
        return obs
    if _depth_fraction(sensor, T_sb, spec) < vis.depth_min_fraction:
        return obs
    if quick:
        obs.detection = RangeDetection(np.zeros((4, 3)), np.zeros((4, 3)))
        return obs
    img = rasterize_depth(intr, T_sb, spec, vis.depth_max_range)
    if rng is not None and noise.depth_sigma > 0:
        img = img + rng.normal(0.0, noise.depth_sigma, img.shape)
    obs.raw = img
    vv, uu = np.nonzero(np.isfinite(img))
    if len(uu) < 4:
        return obs
    keep = stride_subsample(len(uu), vis.depth_max_inside)
    inside = np.column_stack([uu[keep], vv[keep], img[vv[keep], uu[keep]]]).astype(float)
    per = T_sb.apply(sample_perimeter(spec, vis.depth_boundary_step))
    ok = (per[:, 2] > vis.min_range) & (per[:, 2] <= vis.depth_max_range)
    u = intr.fx * per[:, 0] / np.where(ok, per[:, 2], 1.0) + intr.cx
    v = intr.fy * per[:, 1] / np.where(ok, per[:, 2], 1.0) + intr.cy
    ok &= intr.in_bounds(np.column_stack([u, v]))
    if ok.sum() < 4:
        return obs
    Z = per[ok, 2]
    if rng is not None and noise.depth_sigma > 0:
        Z = Z + rng.normal(0.0, noise.depth_sigma, Z.shape)
    boundary = np.column_stack([u[ok], v[ok], Z])
    obs.detection = RangeDetection(inside, boundary)
    obs.limits = projected_limits(replace(intr, distortion=(0.0,) * 5), T_sb, spec, vis.limits_step)
    return obs


# ----------------------------------------------------------------------------
# generation


def generate(cfg: SceneConfig, with_raw: bool = True) -> tuple[Dataset, GroundTruth]:
    """Simulate every collection of ``cfg.trajectory``. Deterministic in ``cfg.seed``."""
    world_T = {s.id: cfg.tree.chain_to(s.data_frame) for s in cfg.sensors}
    collections = []
    poses = {}
    raw_cache = {}
    dropped = 0
    for i, pose in enumerate(cfg.trajectory):
        cid = cfg.first_collection_id + i
        col = Collection(cid)
        for s in cfg.sensors:
            # independent stream per (collection, sensor), derived from the master seed
            srng = np.random.default_rng([cfg.seed, cid, _stable_hash(s.id)])
            obs = observe(s, world_T[s.id], pose, cfg, srng)
            if obs.detection is not None:
                col.detections[s.id] = obs.detection
            if obs.limits is not None and obs.detection is not None:
                col.limits[s.id] = obs.limits
            if with_raw and obs.raw is not None and s.modality != "rgb":
                sub = "depth" if s.modality == "depth" else "clouds"
                rel = f"{sub}/c{cid:03d}_{s.id}.bin"
                col.raw[s.id] = rel
                raw_cache[rel] = obs.raw
        if not col.detections:
            dropped += 1
            continue
        collections.append(col)
        poses[cid] = pose
    ds = Dataset(cfg.pattern, cfg.tree.copy(), [replace(s) for s in cfg.sensors], collections,
                 {"generator": {"seed": cfg.seed, "noise": _noise_doc(cfg.noise)}}, raw_cache=raw_cache)
    stats = dataset_stats(ds)
    manifest = {
        "seed": cfg.seed,
        "requested": len(cfg.trajectory),
        "dropped_empty": dropped,
        **stats.to_dict(),
    }
    ds.meta["manifest"] = manifest
    return ds, GroundTruth(cfg.tree.copy(), poses, manifest)


def _noise_doc(noise: NoiseModel) -> dict:
    return {"rgb_pixel_sigma": noise.rgb_pixel_sigma, "range_sigma": noise.range_sigma,
            "depth_sigma": noise.depth_sigma}


def _stable_hash(s: str) -> int:
    h = 2166136261
    for ch in s.encode():
        h = ((h ^ ch) * 16777619) & 0xFFFFFFFF
    return h


def perturb_initial(gt: GroundTruth, trans_mag: float, rot_mag: float, seed: int,
                    sensors=None, anchor: Optional[str] = None) -> TransformTree:
    """Copy of the ground-truth tree with every non-anchored calibrated edge moved
    by exactly ``trans_mag`` meters and rotated by exactly ``rot_mag`` radians
    about a random axis."""
    if trans_mag < 0 or rot_mag < 0:
        raise ValueError("perturbation magnitudes must be non-negative")
    tree = gt.tree.copy()
    rng = np.random.default_rng(seed)
    if sensors is None:
        edges = [e.child for e in tree if e.kind == "optimized"]
        anchored_children = set()
    else:
        edges = [s.calibrated_edge[1] for s in sensors]
        anchored_children = {s.calibrated_edge[1] for s in sensors if s.anchored or s.id == anchor}
    for child in edges:
        u = rng.normal(size=3)
        u /= np.linalg.norm(u)
        a = rng.normal(size=3)
        a /= np.linalg.norm(a)
        if child in anchored_children:
            continue
        e = tree.edge(child)
        T = e.transform
        tree.set_transform(child, RigidTransform(exp_so3(rot_mag * a) @ T.rotation, T.translation + trans_mag * u))
    return tree


# ----------------------------------------------------------------------------
# trajectory planning


@dataclass
class Candidate:
    pose: RigidTransform
    detected: frozenset
    partials: int
    complete: bool


WORK_VOLUME = ((-1.5, 1.5), (-0.3, 0.8), (0.7, 1.6))


def _sample_pose(rng: np.random.Generator, sensor_positions: np.ndarray, spec: PatternSpec) -> RigidTransform:
    lo = np.array([w[0] for w in WORK_VOLUME])
    hi = np.array([w[1] for w in WORK_VOLUME])
    center = lo + rng.random(3) * (hi - lo)
    k = rng.integers(1, len(sensor_positions) + 1)
    pick = rng.choice(len(sensor_positions), size=k, replace=False)
    target = sensor_positions[pick].mean(axis=0)
    z = target - center
    z /= np.linalg.norm(z)
    # tilt the face away from the exact target
    z = exp_so3(rng.normal(0.0, 0.25, 3)) @ z
    helper = np.array([0.0, 0.0, 1.0]) if abs(z[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    x = np.cross(helper, z)
    x /= np.linalg.norm(x)
    x = exp_so3(z * rng.uniform(-math.pi, math.pi)) @ x
    y = np.cross(z, x)
    R = np.column_stack([x, y, z])
    t = center - R @ spec.center
    return RigidTransform(R, t)


def random_board_poses(cfg: SceneConfig, n: int, seed: int) -> list:
    """``n`` board poses drawn like trajectory candidates, with no count constraints."""
    rng = np.random.default_rng(seed)
    positions = np.array([cfg.tree.chain_to(s.data_frame).translation for s in cfg.sensors])
    return [_sample_pose(rng, positions, cfg.pattern) for _ in range(n)]


def evaluate_pose(cfg: SceneConfig, pose: RigidTransform, world_T: dict) -> Candidate:
    detected = set()
    partials = 0
    for s in cfg.sensors:
        T_sb = _board_in_sensor(world_T[s.id], pose)
        if s.modality == "rgb":
            seen = observe_rgb(s, T_sb, cfg.pattern, cfg.visibility)
            if seen is not None:
                detected.add(s.id)
                partials += len(seen[0]) < cfg.pattern.n_corners
        else:
            obs = observe(s, world_T[s.id], pose, cfg, None, quick=True)
            if obs.detection is not None:
                detected.add(s.id)
    ids = {s.id for s in cfg.sensors}
    return Candidate(pose, frozenset(detected), partials, detected == ids)


def plan_trajectory(cfg: SceneConfig, n_collections: int, n_partials: int, n_complete: int, seed: int,
                    min_views: int = 4, n_candidates: int = 500, attempts: int = 400) -> list:
    """Choose board poses whose noiseless observations give exactly the requested
    number of collections, RGB partial detections and complete collections,
    with every sensor detecting the board at least ``min_views`` times."""
    rng = np.random.default_rng(seed)
    world_T = {s.id: cfg.tree.chain_to(s.data_frame) for s in cfg.sensors}
    positions = np.array([T.translation for T in world_T.values()])
    sensor_ids = [s.id for s in cfg.sensors]
    pool = []
    n_complete_pool = 0
    tries = 0
    while (len(pool) < n_candidates or n_complete_pool < max(2 * n_complete, 1)) and tries < 40 * n_candidates:
        tries += 1
        c = evaluate_pose(cfg, _sample_pose(rng, positions, cfg.pattern), world_T)
        if not c.detected:
            continue
        if c.complete and n_complete_pool >= max(2 * n_complete, 1) and len(pool) >= n_candidates // 4:
            continue
        pool.append(c)
        n_complete_pool += c.complete
    complete = [c for c in pool if c.complete]
    incomplete = [c for c in pool if not c.complete]
    if len(complete) < n_complete:
        raise RuntimeError(f"only {len(complete)} complete candidate poses found, need {n_complete}")
    for _ in range(attempts):
        order_c = rng.permutation(len(complete))
        chosen = [complete[i] for i in order_c[:n_complete]]
        budget = n_partials - sum(c.partials for c in chosen)
        slots = n_collections - n_complete
        views = {s: sum(s in c.detected for c in chosen) for s in sensor_ids}
        avail = [incomplete[i] for i in rng.permutation(len(incomplete))]
        maxp = max((c.partials for c in incomplete), default=0)
        while slots > 0 and avail:
            deficit = {s: max(0, min_views - views[s]) for s in sensor_ids}
            best_i, best_score = None, -1.0
            for i, c in enumerate(avail):
                rest = budget - c.partials
                if rest < 0 or rest > maxp * (slots - 1):
                    continue
                score = sum(deficit[s] for s in c.detected) + rng.random() * 0.5
                if score > best_score:
                    best_i, best_score = i, score
            if best_i is None:
                break
            c = avail.pop(best_i)
            chosen.append(c)
            budget -= c.partials
            slots -= 1
            for s in c.detected:
                views[s] += 1
        if slots == 0 and budget == 0 and all(v >= min_views for v in views.values()):
            order = rng.permutation(len(chosen))
            return [chosen[i].pose for i in order]
    raise RuntimeError("could not find a trajectory matching the requested counts")


# ----------------------------------------------------------------------------
# presets

# (collections, RGB partials, complete)
PRESET_COUNTS = {
    "sim_train": (23, 35, 5),
    "sim_test": (17, 26, 4),
    "real_train": (29, 61, 6),
    "real_test": (14, 29, 4),
}


def default_scene(preset: str = "sim_train", seed: int = 0, noise: Optional[NoiseModel] = None,
                  counts: Optional[tuple] = None, first_collection_id: int = 0, **plan_kw) -> SceneConfig:
    tree, sensors, spec = default_cell()
    cfg = SceneConfig(tree, sensors, spec, [], noise if noise is not None else NoiseModel(), seed=seed,
                      first_collection_id=first_collection_id)
    n, p, k = counts if counts is not None else PRESET_COUNTS[preset]
    cfg.trajectory = plan_trajectory(cfg, n, p, k, seed=seed, **plan_kw)
    return cfg


def scene_to_doc(cfg: SceneConfig) -> dict:
    from .dataset import sensor_to_doc

    return {
        "tree": tree_to_doc(cfg.tree),
        "sensors": [sensor_to_doc(s) for s in cfg.sensors],
        "pattern": cfg.pattern.to_dict(),
        "trajectory": [{"rotation": T.rotation.tolist(), "translation": T.translation.tolist()} for T in cfg.trajectory],
        "noise": _noise_doc(cfg.noise),
        "lidar": {"rings": cfg.lidar.rings, "elevation_min": cfg.lidar.elevation_min,
                  "elevation_max": cfg.lidar.elevation_max, "azimuth_step": cfg.lidar.azimuth_step,
                  "max_range": cfg.lidar.max_range},
        "cell_dims": list(cfg.cell_dims),
        "seed": cfg.seed,
        "first_collection_id": cfg.first_collection_id,
    }


def label_seeds(dataset: Dataset, gt: GroundTruth) -> dict:
    """Seeds near the true board center for every range sensor that sees the board.

    Stands in for a person clicking the board once per collection; lidar seeds
    are 3D points in the sensor frame, depth seeds are the valid pixel closest
    to the projected board center.
    """
    seeds = {}
    for s in dataset.sensors:
        if s.modality == "rgb":
            continue
        world_T_sensor = gt.tree.chain_to(s.data_frame)
        per = {}
        for c in dataset.collections:
            if s.id not in c.raw or s.id not in c.detections or c.id not in gt.pattern_poses:
                continue
            p = _board_in_sensor(world_T_sensor, gt.pattern_poses[c.id]).apply(dataset.pattern.center)
            if s.modality == "lidar3d":
                per[str(c.id)] = [float(v) for v in p]
                continue
            img = dataset.load_raw(c.id, s.id)
            vv, uu = np.nonzero(np.isfinite(img))
            if len(uu) == 0 or p[2] <= 0:
                continue
            uv, _ = project_points(s.intrinsics, p[None, :])
            k = int(np.argmin((uu - uv[0, 0]) ** 2 + (vv - uv[0, 1]) ** 2))
            per[str(c.id)] = [int(uu[k]), int(vv[k])]
        seeds[s.id] = per
    return {"seeds": seeds}
