"""Joint solve over sensor edges and per-collection board poses.

The unknowns are one 6-DOF pose (rotation vector, translation) per
non-anchored calibrated edge plus one per collection's board pose. The cost
is the sum of squared, per-kind weighted residuals; it is minimized with a
Levenberg-Marquardt loop over a block-sparse forward-difference Jacobian.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.spatial import ConvexHull

from . import __version__
from .dataset import Dataset, RangeDetection, RgbDetection, SensorSpec, tree_to_doc
from .geometry import (
    RigidTransform,
    TransformTree,
    canonical_rotvec,
    exp_so3,
    from_param,
    pattern_frame_name,
    to_param,
)
from .residuals import DEFAULT_WEIGHTS, KIND_WEIGHT_KEY, _sample_tree as _sample_kdtree, closest_on_perimeter
from .sensors import backproject_depth_points, boundary_samples, corner_points, project_points, undistort_pixels

log = logging.getLogger(__name__)

JACOBIAN_STEP = 1e-6
AUTO = "auto"


def _sample_xy(spec):
    return boundary_samples(spec)[:, :2]


class CalibrationError(RuntimeError):
    pass


@dataclass
class CalibrationOptions:
    anchor: Optional[str] = AUTO  # sensor id, AUTO (dataset flag or first sensor) or None
    max_iters: int = 200
    cost_tol: float = 1e-10
    step_tol: float = 1e-10
    initial_damping: float = 1e-3
    max_damping: float = 1e16
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    longitudinal: str = "polyline"

    def to_doc(self) -> dict:
        return {
            "anchor": self.anchor, "max_iters": self.max_iters, "cost_tol": self.cost_tol,
            "step_tol": self.step_tol, "initial_damping": self.initial_damping,
            "weights": dict(self.weights), "longitudinal": self.longitudinal,
        }


def resolve_anchor(dataset: Dataset, anchor) -> Optional[str]:
    if anchor is None:
        return None
    if anchor == AUTO:
        flagged = [s.id for s in dataset.sensors if s.anchored]
        return flagged[0] if flagged else dataset.sensors[0].id
    if anchor not in dataset.sensor_ids:
        raise CalibrationError(f"anchor {anchor!r} is not a sensor of the dataset")
    return anchor


# ----------------------------------------------------------------------------
# problem layout


@dataclass
class _Block:
    collection: int
    sensor: SensorSpec
    kind: str
    rows: slice
    data: tuple
    weight: float


@dataclass
class ParameterLayout:
    """Slices of the flat parameter vector. ``entries`` is a list of (kind, key, slice)
    where kind is 'edge' (key = child frame) or 'pattern' (key = collection id)."""

    entries: list

    @property
    def size(self) -> int:
        return 6 * len(self.entries)

    def slice_of(self, kind: str, key) -> slice:
        for k, name, sl in self.entries:
            if k == kind and name == key:
                return sl
        raise KeyError((kind, key))

    def to_doc(self) -> list:
        return [{"kind": k, "key": key, "start": sl.start, "stop": sl.stop} for k, key, sl in self.entries]


class Problem:
    """Residual/Jacobian evaluator for a dataset and a tree holding the current estimate."""

    def __init__(self, dataset: Dataset, tree: TransformTree, edge_children: list, collections: list,
                 weights: Optional[dict] = None, longitudinal: str = "polyline", sensors: Optional[list] = None):
        self.dataset = dataset
        self.tree = tree.copy()
        self.spec = dataset.pattern
        self.longitudinal = longitudinal
        w = {**DEFAULT_WEIGHTS, **(weights or {})}
        entries = []
        for i, child in enumerate(edge_children):
            entries.append(("edge", child, slice(6 * i, 6 * i + 6)))
        off = 6 * len(edge_children)
        for j, cid in enumerate(collections):
            entries.append(("pattern", cid, slice(off + 6 * j, off + 6 * j + 6)))
        self.layout = ParameterLayout(entries)
        self.edge_children = list(edge_children)
        self.collections = list(collections)
        self.sensors = sorted(sensors if sensors is not None else dataset.sensors, key=lambda s: s.id)
        self._paths = {s.id: [e.child for e in self.tree.path(s.data_frame)] for s in self.sensors}
        self._edge_set = set(self.edge_children)
        # sensor -> packed edges on its chain
        self.sensor_edges = {s.id: [c for c in self._paths[s.id] if c in self._edge_set] for s in self.sensors}

        blocks = []
        row = 0
        for cid in self.collections:
            col = dataset.collection(cid)
            for s in self.sensors:
                det = col.detections.get(s.id)
                if det is None:
                    continue
                for kind, data in self._block_data(s, det):
                    # the solver sees both pixel components of a corner error
                    n = len(data[0]) * (2 if kind == "rgb_reprojection" else 1)
                    blocks.append(_Block(cid, s, kind, slice(row, row + n), data, w[KIND_WEIGHT_KEY[kind]]))
                    row += n
        self.blocks = blocks
        self.n_residuals = row
        self._by_collection = {cid: [i for i, b in enumerate(blocks) if b.collection == cid] for cid in self.collections}
        self._by_sensor = {s.id: [i for i, b in enumerate(blocks) if b.sensor.id == s.id] for s in self.sensors}
        self.x0 = self.pack(self.tree)

    def _block_data(self, s: SensorSpec, det):
        if s.modality == "rgb":
            return [("rgb_reprojection", (det.uv, corner_points(self.spec)[det.ids]))]
        inside, boundary = det.inside, det.boundary
        if s.modality == "depth":
            inside = backproject_depth_points(s.intrinsics, inside)
            boundary = backproject_depth_points(s.intrinsics, boundary)
        return [("range_orthogonal", (inside,)), ("range_longitudinal", (boundary,))]

    # -- packing

    def pack(self, tree: TransformTree) -> np.ndarray:
        x = np.zeros(self.layout.size)
        for kind, key, sl in self.layout.entries:
            child = key if kind == "edge" else pattern_frame_name(key)
            x[sl] = to_param(tree.edge(child).transform)
        return x

    def unpack(self, x: np.ndarray, tree: Optional[TransformTree] = None) -> TransformTree:
        tree = (tree or self.tree).copy()
        for kind, key, sl in self.layout.entries:
            child = key if kind == "edge" else pattern_frame_name(key)
            tree.set_transform(child, from_param(x[sl]))
        return tree

    def canonicalize(self, x: np.ndarray) -> np.ndarray:
        x = x.copy()
        for _, _, sl in self.layout.entries:
            x[sl.start:sl.start + 3] = canonical_rotvec(x[sl.start:sl.start + 3])
        return x

    # -- evaluation

    def _edge_T(self, x, child) -> RigidTransform:
        if child in self._edge_set:
            return from_param(x[self.layout.slice_of("edge", child)])
        return self.tree.edge(child).transform

    def sensor_poses(self, x, only=None) -> dict:
        out = {}
        edge_T = {c: from_param(x[sl]) for k, c, sl in self.layout.entries if k == "edge"}
        for s in self.sensors:
            if only is not None and s.id not in only:
                continue
            M = np.eye(4)
            for c in self._paths[s.id]:
                T = edge_T.get(c)
                if T is None:
                    T = self.tree.edge(c).transform
                M = M @ T.matrix()
            out[s.id] = M
        return out

    def pattern_poses(self, x) -> dict:
        return {key: from_param(x[sl]).matrix() for k, key, sl in self.layout.entries if k == "pattern"}

    def block_vector(self, b: _Block, world_T_sensor: np.ndarray, world_T_pattern: np.ndarray) -> np.ndarray:
        """The geometric quantity a block's residuals are a norm of.

        Projected pixels for RGB, board-frame z for orthogonal terms, board-frame
        xy for longitudinal terms.
        """
        if b.kind == "rgb_reprojection":
            M = np.linalg.solve(world_T_sensor, world_T_pattern)  # sensor_T_pattern
            P = b.data[1] @ M[:3, :3].T + M[:3, 3]
            uv, valid = project_points(b.sensor.intrinsics, P)
            uv[~valid] = np.nan
            return uv
        M = np.linalg.solve(world_T_pattern, world_T_sensor)  # pattern_T_sensor
        P = b.data[0] @ M[:3, :3].T + M[:3, 3]
        if b.kind == "range_orthogonal":
            return P[:, 2:3]
        return P[:, :2]

    def values_and_gradient(self, b: _Block, V: np.ndarray) -> tuple[np.ndarray, Optional[np.ndarray]]:
        """Unweighted residuals from ``block_vector`` output, and d(residual)/dV per row.

        RGB blocks return the (du, dv) error of every corner, interleaved, and
        no gradient: those rows are the block vector itself. Their squares sum
        to the squared corner distances, so the cost is unchanged, but unlike
        the distance they stay smooth when a corner error shrinks to zero.
        Corners behind the camera contribute zeros.
        """
        if b.kind == "range_orthogonal":
            return V[:, 0].copy(), np.ones_like(V)
        if b.kind == "rgb_reprojection":
            e = V - b.data[0]
            e[np.isnan(e)] = 0.0
            return e.ravel(), None
        if self.longitudinal == "samples":
            d, idx = _sample_kdtree(self.spec).query(V)
            q = _sample_xy(self.spec)[idx]
            with np.errstate(invalid="ignore", divide="ignore"):
                g = np.where(d[:, None] > 0, (V - q) / d[:, None], 0.0)
            return np.asarray(d, dtype=float), g
        d, c, n = closest_on_perimeter(V, self.spec)
        with np.errstate(invalid="ignore", divide="ignore"):
            g = np.where(d[:, None] > 0, (V - c) / d[:, None], n)
        return d, g

    def block_values(self, b: _Block, world_T_sensor: np.ndarray, world_T_pattern: np.ndarray) -> np.ndarray:
        return self.values_and_gradient(b, self.block_vector(b, world_T_sensor, world_T_pattern))[0]

    def residuals(self, x: np.ndarray, weighted: bool = True) -> np.ndarray:
        Ts = self.sensor_poses(x)
        Tp = self.pattern_poses(x)
        r = np.empty(self.n_residuals)
        for b in self.blocks:
            v = self.block_values(b, Ts[b.sensor.id], Tp[b.collection])
            r[b.rows] = b.weight * v if weighted else v
        return r

    def cost(self, x: np.ndarray) -> float:
        r = self.residuals(x)
        return float(r @ r)

    def dependency_blocks(self, kind: str, key) -> list:
        if kind == "pattern":
            return self._by_collection[key]
        out = []
        for s in self.sensors:
            if key in self.sensor_edges[s.id]:
                out.extend(self._by_sensor[s.id])
        return sorted(out)

    def sparsity(self) -> sp.csr_matrix:
        rows, cols = [], []
        for kind, key, sl in self.layout.entries:
            for bi in self.dependency_blocks(kind, key):
                b = self.blocks[bi]
                r = np.arange(b.rows.start, b.rows.stop)
                for j in range(sl.start, sl.stop):
                    rows.append(r)
                    cols.append(np.full(len(r), j))
        if not rows:
            return sp.csr_matrix((self.n_residuals, self.layout.size))
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        return sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_residuals, self.layout.size))

    def jacobian(self, x: np.ndarray, step: float = JACOBIAN_STEP) -> sp.csr_matrix:
        """Weighted residual Jacobian, one forward difference per parameter.

        Only the blocks that depend on a parameter are re-evaluated. The
        difference is taken on each block's geometric vector and mapped through
        the exact gradient of the norm, which stays accurate when residuals
        approach zero.
        """
        Ts = self.sensor_poses(x)
        Tp = self.pattern_poses(x)
        base = []
        for b in self.blocks:
            V = self.block_vector(b, Ts[b.sensor.id], Tp[b.collection])
            _, g = self.values_and_gradient(b, V)
            base.append((V, None if g is None else b.weight * g))
        rows, cols, vals = [], [], []
        for kind, key, sl in self.layout.entries:
            deps = self.dependency_blocks(kind, key)
            if not deps:
                continue
            for j in range(sl.start, sl.stop):
                xj = x.copy()
                xj[j] += step
                if kind == "pattern":
                    Tp_j = {key: from_param(xj[sl]).matrix()}
                    Ts_j = {}
                else:
                    Tp_j = {}
                    Ts_j = self.sensor_poses(xj, only={self.blocks[bi].sensor.id for bi in deps})
                for bi in deps:
                    b = self.blocks[bi]
                    V0, g = base[bi]
                    V = self.block_vector(b, Ts_j.get(b.sensor.id, Ts[b.sensor.id]),
                                          Tp_j.get(b.collection, Tp[b.collection]))
                    if g is None:
                        d = b.weight * ((V - V0) / step).ravel()
                    else:
                        d = ((V - V0) / step * g).sum(axis=1)
                    d[~np.isfinite(d)] = 0.0
                    rows.append(np.arange(b.rows.start, b.rows.stop))
                    cols.append(np.full(len(d), j))
                    vals.append(d)
        if not rows:
            return sp.csr_matrix((self.n_residuals, self.layout.size))
        return sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_residuals, self.layout.size),
        )


# ----------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class SolveReport:
    x: np.ndarray
    status: str
    iterations: int
    initial_cost: float
    final_cost: float
    history: list  # accepted costs, starting with the initial one


def levenberg_marquardt(problem: Problem, x0: np.ndarray, max_iters=200, cost_tol=1e-10, step_tol=1e-10,
                        initial_damping=1e-3, max_damping=1e16) -> SolveReport:
    x = problem.canonicalize(x0)
    r = problem.residuals(x)
    cost = float(r @ r)
    history = [cost]
    lam = initial_damping
    status = "max_iters"
    it = 0
    if not math.isfinite(cost):
        return SolveReport(x, "degenerate", 0, cost, cost, history)
    while it < max_iters:
        if cost == 0.0:
            status = "converged"
            break
        it += 1
        J = problem.jacobian(x)
        A = (J.T @ J).toarray()
        g = J.T @ r
        d = np.diag(A).copy()
        d[d <= 0] = 1.0
        accepted = False
        while lam <= max_damping:
            try:
                delta = np.linalg.solve(A + lam * np.diag(d), -g)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            if not np.all(np.isfinite(delta)):
                lam *= 10.0
                continue
            if np.max(np.abs(delta)) < step_tol:
                status = "converged"
                break
            x_new = problem.canonicalize(x + delta)
            r_new = problem.residuals(x_new)
            c_new = float(r_new @ r_new)
            if math.isfinite(c_new) and c_new < cost:
                rel = (cost - c_new) / cost
                x, r, cost = x_new, r_new, c_new
                history.append(cost)
                lam = max(lam / 10.0, 1e-15)
                accepted = True
                if rel < cost_tol:
                    status = "converged"
                break
            lam *= 10.0
        if status == "converged":
            break
        if not accepted:
            status = "degenerate"
            break
    return SolveReport(x, status, it, history[0], cost, history)


# ----------------------------------------------------------------------------
# initialization


def _homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    def norm(p):
        c = p.mean(axis=0)
        s = math.sqrt(2) / max(np.sqrt(((p - c) ** 2).sum(axis=1)).mean(), 1e-12)
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])

    Ts, Td = norm(src), norm(dst)
    a = np.column_stack([src, np.ones(len(src))]) @ Ts.T
    b = np.column_stack([dst, np.ones(len(dst))]) @ Td.T
    rows = []
    for (x, y, _), (u, v, _) in zip(a, b):
        rows.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        rows.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, _, Vt = np.linalg.svd(np.array(rows))
    H = Vt[-1].reshape(3, 3)
    return np.linalg.inv(Td) @ H @ Ts


def planar_pose(intr, ids, uv, spec) -> RigidTransform:
    """``camera_T_pattern`` from >= 4 board corners via homography decomposition."""
    if len(ids) < 4:
        raise CalibrationError("need at least 4 corners for a planar pose")
    obj = corner_points(spec)[ids][:, :2]
    xn = undistort_pixels(intr, uv)
    H = _homography(obj, xn)
    h1, h2, h3 = H[:, 0], H[:, 1], H[:, 2]
    s = 2.0 / (np.linalg.norm(h1) + np.linalg.norm(h2))
    if h3[2] * s < 0:
        s = -s
    r1, r2, t = s * h1, s * h2, s * h3
    U, _, Vt = np.linalg.svd(np.column_stack([r1, r2, np.cross(r1, r2)]))
    R = U @ Vt
    if np.linalg.det(R) < 0:
        R = U @ np.diag([1, 1, -1]) @ Vt
    return RigidTransform(R, t)


def plane_pose(points: np.ndarray, spec) -> RigidTransform:
    """``sensor_T_pattern`` guess from range points on the board.

    Orientation comes from a plane fit plus the minimum-area rectangle around
    the in-plane points; the board's longer side is matched to the longer
    rectangle side. The face normal points toward the sensor.
    """
    c = points.mean(axis=0)
    _, _, Vt = np.linalg.svd(points - c)
    n = Vt[2]
    if n @ (-c) < 0:
        n = -n
    e1 = Vt[0] - (Vt[0] @ n) * n
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    uv = np.column_stack([(points - c) @ e1, (points - c) @ e2])
    angle, center, (w, h) = _min_area_rect(uv)
    ax = np.cos(angle) * e1 + np.sin(angle) * e2
    ay = np.cross(n, ax)
    bw, bh = spec.size
    if (bw >= bh) != (w >= h):
        ax, ay = ay, -ax
    R = np.column_stack([ax, ay, n])
    mid = c + center[0] * e1 + center[1] * e2
    return RigidTransform(R, mid - R @ spec.center)


def _min_area_rect(uv: np.ndarray):
    try:
        hull = uv[ConvexHull(uv).vertices]
    except Exception:
        hull = uv
    best = None
    for i in range(len(hull)):
        e = hull[(i + 1) % len(hull)] - hull[i]
        if np.linalg.norm(e) < 1e-12:
            continue
        a = math.atan2(e[1], e[0])
        ca, sa = math.cos(a), math.sin(a)
        rot = uv @ np.array([[ca, -sa], [sa, ca]])
        lo, hi = rot.min(axis=0), rot.max(axis=0)
        area = float(np.prod(hi - lo))
        if best is None or area < best[0]:
            mid = (lo + hi) / 2
            center = np.array([ca * mid[0] - sa * mid[1], sa * mid[0] + ca * mid[1]])
            best = (area, a, center, tuple(hi - lo))
    if best is None:
        return 0.0, uv.mean(axis=0), (0.0, 0.0)
    return best[1], best[2], best[3]


MODALITY_PRIORITY = {"rgb": 0, "depth": 1, "lidar3d": 2}


def single_view_pose(sensor: SensorSpec, det, spec) -> Optional[RigidTransform]:
    """``sensor_T_pattern`` from one detection (no refinement)."""
    if sensor.modality == "rgb":
        if len(det.ids) < 4:
            return None
        return planar_pose(sensor.intrinsics, det.ids, det.uv, spec)
    pts = det.inside
    if sensor.modality == "depth":
        pts = backproject_depth_points(sensor.intrinsics, pts)
    if len(pts) < 3:
        return None
    return plane_pose(pts, spec)


def initialize_pattern_poses(dataset: Dataset, tree: TransformTree, refine: bool = True,
                             collections=None, weights=None, longitudinal="polyline") -> dict:
    """World poses of the board for each collection, sensors held at ``tree``.

    Returns {collection id: world_T_pattern}. Collections without a usable
    detection are left out with a warning.
    """
    out = {}
    cols = dataset.collections if collections is None else [dataset.collection(c) for c in collections]
    for col in cols:
        order = sorted((s for s in dataset.sensors if col.detections.get(s.id) is not None),
                       key=lambda s: (MODALITY_PRIORITY[s.modality], dataset.sensor_ids.index(s.id)))
        pose = None
        for s in order:
            T_sp = single_view_pose(s, col.detections[s.id], dataset.pattern)
            if T_sp is not None:
                pose = tree.chain_to(s.data_frame) @ T_sp
                break
        if pose is None:
            log.warning("collection %d has no usable detection; excluded", col.id)
            continue
        out[col.id] = pose
    if refine and out:
        out = refine_pattern_poses(dataset, tree, out, weights=weights, longitudinal=longitudinal)
    return out


def refine_pattern_poses(dataset: Dataset, tree: TransformTree, poses: dict, weights=None,
                         longitudinal="polyline", max_iters: int = 100) -> dict:
    """Per-collection board pose refinement with all sensor edges frozen."""
    out = {}
    for cid, pose in poses.items():
        t = tree.copy()
        t.add_edge(t.root, pattern_frame_name(cid), pose, "pattern")
        prob = Problem(dataset, t, [], [cid], weights, longitudinal)
        rep = levenberg_marquardt(prob, prob.x0, max_iters=max_iters, cost_tol=1e-12, step_tol=1e-12)
        out[cid] = from_param(rep.x)
    return out


# ----------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationResult:
    tree: TransformTree
    pattern_poses: dict
    initial_cost: float
    final_cost: float
    iterations: int
    status: str
    history: list
    rms: dict  # sensor id -> {kind: rms}
    anchor: Optional[str]
    options: CalibrationOptions
    layout: ParameterLayout
    meta: dict = field(default_factory=dict)

    def sensor_tree(self) -> TransformTree:
        t = self.tree.copy()
        for e in list(t):
            if e.kind == "pattern":
                t.remove_edge(e.child)
        return t

    def to_doc(self) -> dict:
        return {
            "tool": {"name": "sensorcal", "version": __version__},
            "status": self.status,
            "anchor": self.anchor,
            "iterations": self.iterations,
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "cost_history": list(self.history),
            "rms": self.rms,
            "options": self.options.to_doc(),
            "layout": self.layout.to_doc(),
            "tree": tree_to_doc(self.tree),
            **self.meta,
        }


def load_result_tree(doc: dict) -> TransformTree:
    from .dataset import tree_from_doc

    return tree_from_doc(doc["tree"], "result.tree")


def prepare_tree(dataset: Dataset, tree: TransformTree, anchor: Optional[str]) -> tuple[TransformTree, list]:
    """Mark calibrated edges; returns (tree, packed edge children)."""
    t = tree.copy()
    packed = []
    anchored_edges = set()
    if anchor is not None:
        anchored_edges.add(dataset.sensor(anchor).calibrated_edge[1])
    for s in dataset.sensors:
        child = s.calibrated_edge[1]
        e = t.find_edge(*s.calibrated_edge)
        if child in anchored_edges:
            e.kind = "static"
            continue
        e.kind = "optimized"
        if child not in packed:
            packed.append(child)
    for s in dataset.sensors:
        on_chain = [e.child for e in t.path(s.data_frame) if e.child in packed]
        if s.id == anchor and on_chain:
            raise CalibrationError(f"anchored sensor {s.id!r} sits below optimized edge(s) {on_chain}")
        if s.id != anchor and len(on_chain) != 1:
            raise CalibrationError(
                f"sensor {s.id!r} must have exactly one optimized edge on its chain, found {on_chain}"
            )
    return t, packed


def calibrate(dataset: Dataset, initial_tree: Optional[TransformTree] = None,
              options: Optional[CalibrationOptions] = None, pattern_poses: Optional[dict] = None) -> CalibrationResult:
    """Estimate every non-anchored calibrated edge and every board pose jointly."""
    opts = options or CalibrationOptions()
    anchor = resolve_anchor(dataset, opts.anchor)
    base = (initial_tree or dataset.tree).copy()
    for e in list(base):
        if e.kind == "pattern":
            if pattern_poses is None:
                pattern_poses = {}
            cid = int(e.child.rsplit("_c", 1)[1])
            pattern_poses.setdefault(cid, e.transform)
            base.remove_edge(e.child)
    tree, packed = prepare_tree(dataset, base, anchor)
    if pattern_poses is None:
        pattern_poses = initialize_pattern_poses(dataset, tree, weights=opts.weights, longitudinal=opts.longitudinal)
    cids = sorted(c.id for c in dataset.collections if c.id in pattern_poses)
    missing = [c.id for c in dataset.collections if c.id not in pattern_poses]
    if missing:
        log.warning("collections %s have no board pose and are excluded", missing)
    for cid in cids:
        tree.add_edge(tree.root, pattern_frame_name(cid), pattern_poses[cid], "pattern")
    prob = Problem(dataset, tree, packed, cids, opts.weights, opts.longitudinal)
    rep = levenberg_marquardt(prob, prob.x0, opts.max_iters, opts.cost_tol, opts.step_tol,
                              opts.initial_damping, opts.max_damping)
    out_tree = prob.unpack(rep.x)
    if anchor is not None:
        # bit-identical anchor edge
        e = dataset.sensor(anchor).calibrated_edge
        out_tree.set_transform(e[1], tree.edge(e[1]).transform)
    rms = per_sensor_rms(prob, rep.x)
    poses = {cid: out_tree.edge(pattern_frame_name(cid)).transform for cid in cids}
    return CalibrationResult(out_tree, poses, rep.initial_cost, rep.final_cost, rep.iterations, rep.status,
                             rep.history, rms, anchor, opts, prob.layout)


def per_sensor_rms(prob: Problem, x: np.ndarray) -> dict:
    r = prob.residuals(x, weighted=False)
    acc = {}
    for b in prob.blocks:
        v = r[b.rows]
        d = acc.setdefault(b.sensor.id, {}).setdefault(b.kind, [0.0, 0])
        d[0] += float(v @ v)
        d[1] += len(v) // 2 if b.kind == "rgb_reprojection" else len(v)
    return {sid: {k: math.sqrt(s / n) if n else 0.0 for k, (s, n) in kinds.items()} for sid, kinds in acc.items()}


def input_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
