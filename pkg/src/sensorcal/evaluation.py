"""Pairwise accuracy of a calibration on a held-out dataset.

Each metric maps one sensor's labels into another sensor through the
calibrated tree and reports a root mean square distance:

* rgb -> rgb: corner labels lifted onto the board plane, reprojected (px)
* lidar -> lidar: nearest transformed source point per target point (mm)
* lidar/depth -> rgb/depth: boundary labels projected onto the image and
  compared with the board's physical-limit polyline (px)

Board poses for the test collections are re-estimated with the calibrated
sensors held fixed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations, product
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .calibrator import initialize_pattern_poses
from .dataset import Dataset
from .geometry import RigidTransform, TransformTree
from .sensors import backproject_depth_points, corner_points, project_points, undistort_pixels

TABLES = (
    ("rgb-rgb", "rgb", "rgb", "pixels"),
    ("lidar-lidar", "lidar3d", "lidar3d", "millimeters"),
    ("lidar-rgb", "lidar3d", "rgb", "pixels"),
    ("lidar-depth", "lidar3d", "depth", "pixels"),
    ("depth-rgb", "depth", "rgb", "pixels"),
)
PRECISION = 6  # decimals kept in reports, so text and JSON carry the same numbers


@dataclass
class PairResult:
    """Raw per-point distances of one (src, dst) pair."""

    src: str
    dst: str
    distances: np.ndarray
    collections: int = 0
    excluded: int = 0  # points behind the target camera or outside its image

    @property
    def evaluable(self) -> bool:
        return len(self.distances) > 0

    @property
    def rms(self) -> float:
        if not self.evaluable:
            return math.nan
        return float(np.sqrt(np.mean(self.distances ** 2)))


class Evaluator:
    """Holds a test dataset, the calibrated sensor tree and the test board poses."""

    def __init__(self, dataset: Dataset, tree: TransformTree, pattern_poses: Optional[dict] = None,
                 weights=None, longitudinal: str = "polyline"):
        self.dataset = dataset
        self.tree = tree
        if pattern_poses is None:
            pattern_poses = initialize_pattern_poses(dataset, tree, weights=weights, longitudinal=longitudinal)
        self.pattern_poses = pattern_poses
        self.world_T = {s.id: tree.chain_to(s.data_frame) for s in dataset.sensors}

    def _dst_T_src(self, src: str, dst: str) -> RigidTransform:
        return self.world_T[dst].inverse() @ self.world_T[src]

    def _codetected(self, src: str, dst: str):
        for c in sorted(self.dataset.collections, key=lambda c: c.id):
            a, b = c.detections.get(src), c.detections.get(dst)
            if a is not None and b is not None:
                yield c, a, b

    def _check(self, sid: str, modalities: tuple):
        m = self.dataset.sensor(sid).modality
        if m not in modalities:
            raise ValueError(f"sensor {sid!r} is {m}, expected one of {modalities}")

    def rgb_rgb(self, src: str, dst: str) -> PairResult:
        self._check(src, ("rgb",))
        self._check(dst, ("rgb",))
        s, d = self.dataset.sensor(src), self.dataset.sensor(dst)
        T = self._dst_T_src(src, dst)
        out, n_col, excluded = [], 0, 0
        for c, a, b in self._codetected(src, dst):
            if c.id not in self.pattern_poses:
                continue
            ids, ia, ib = np.intersect1d(a.ids, b.ids, return_indices=True)
            if len(ids) == 0:
                continue
            # board plane in the source camera frame
            src_T_p = self.world_T[src].inverse() @ self.pattern_poses[c.id]
            n = src_T_p.rotation[:, 2]
            o = src_T_p.translation
            rays = np.column_stack([undistort_pixels(s.intrinsics, a.uv[ia]), np.ones(len(ids))])
            denom = rays @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = (n @ o) / denom
            ok = np.isfinite(t) & (t > 0)
            P = T.apply(t[ok, None] * rays[ok])
            uv, valid = project_points(d.intrinsics, P)
            excluded += int((~ok).sum() + (~valid).sum())
            out.append(np.linalg.norm(uv[valid] - b.uv[ib][ok][valid], axis=1))
            n_col += 1
        return PairResult(src, dst, _cat(out), n_col, excluded)

    def lidar_lidar(self, src: str, dst: str) -> PairResult:
        self._check(src, ("lidar3d",))
        self._check(dst, ("lidar3d",))
        T = self._dst_T_src(src, dst)
        out, n_col = [], 0
        for _, a, b in self._codetected(src, dst):
            if len(a.inside) == 0 or len(b.inside) == 0:
                continue
            dist, _ = cKDTree(T.apply(a.inside)).query(b.inside)
            out.append(1000.0 * np.asarray(dist))
            n_col += 1
        return PairResult(src, dst, _cat(out), n_col)

    def range_to_image(self, src: str, dst: str) -> PairResult:
        self._check(src, ("lidar3d", "depth"))
        self._check(dst, ("rgb", "depth"))
        s, d = self.dataset.sensor(src), self.dataset.sensor(dst)
        T = self._dst_T_src(src, dst)
        out, n_col, excluded = [], 0, 0
        for c, a, _ in self._codetected(src, dst):
            limits = c.limits.get(dst)
            if limits is None or len(a.boundary) == 0:
                continue
            pts = a.boundary if s.modality == "lidar3d" else backproject_depth_points(s.intrinsics, a.boundary)
            uv, valid = project_points(d.intrinsics, T.apply(pts))
            valid &= d.intrinsics.in_bounds(uv)
            excluded += int((~valid).sum())
            if valid.any():
                out.append(polyline_distance(uv[valid], limits))
                n_col += 1
        return PairResult(src, dst, _cat(out), n_col, excluded)

    def evaluate(self, src: str, dst: str) -> PairResult:
        ms, md = self.dataset.sensor(src).modality, self.dataset.sensor(dst).modality
        if ms == md == "rgb":
            return self.rgb_rgb(src, dst)
        if ms == md == "lidar3d":
            return self.lidar_lidar(src, dst)
        return self.range_to_image(src, dst)


def _cat(parts) -> np.ndarray:
    return np.concatenate(parts) if parts else np.zeros(0)


def polyline_distance(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Distance from each 2D point to the nearest point of a polyline (consecutive vertices joined)."""
    a, b = poly[:-1], poly[1:]
    ab = b - a
    L = (ab * ab).sum(axis=1)
    L[L == 0] = 1.0
    out = np.empty(len(points))
    for i in range(0, len(points), 256):
        p = points[i:i + 256]
        ap = p[:, None, :] - a[None]
        t = np.clip((ap * ab).sum(-1) / L, 0.0, 1.0)
        off = ap - t[..., None] * ab
        out[i:i + 256] = np.sqrt((off * off).sum(-1).min(axis=1))
    return out


# convenience wrappers -------------------------------------------------------


def eval_rgb_rgb(dataset, tree, src, dst, pattern_poses=None) -> PairResult:
    return Evaluator(dataset, tree, pattern_poses).rgb_rgb(src, dst)


def eval_lidar_lidar(dataset, tree, src, dst, pattern_poses=None) -> PairResult:
    return Evaluator(dataset, tree, pattern_poses or {}).lidar_lidar(src, dst)


def eval_range_to_image(dataset, tree, src, dst, pattern_poses=None) -> PairResult:
    return Evaluator(dataset, tree, pattern_poses or {}).range_to_image(src, dst)


# ----------------------------------------------------------------------------
# report


@dataclass
class PairRow:
    table: str
    src: str
    dst: str
    rms: Optional[float]  # None when not evaluable
    unit: str
    samples: int
    collections: int
    excluded: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class PairwiseReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def table(self, name: str) -> list:
        return [r for r in self.rows if r.table == name]

    @property
    def averages(self) -> dict:
        out = {}
        for name, *_ in TABLES:
            vals = [r.rms for r in self.table(name) if r.rms is not None]
            out[name] = round(sum(vals) / len(vals), PRECISION) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "tables": {
                name: {
                    "unit": unit,
                    "rows": [r.to_dict() for r in self.table(name)],
                    "average": self.averages[name],
                }
                for name, _, _, unit in TABLES
            },
            **self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PairwiseReport":
        rows = [PairRow(**r) for t in doc["tables"].values() for r in t["rows"]]
        return cls(rows, {k: v for k, v in doc.items() if k != "tables"})

    def text(self) -> str:
        lines = []
        for name, _, _, unit in TABLES:
            rows = self.table(name)
            lines.append(f"{name} ({unit})")
            lines.append(f"  {'source':<12} {'target':<12} {'rms':>14} {'samples':>8}")
            notes = []
            for r in rows:
                if r.rms is None:
                    notes.append(f"{r.src} -> {r.dst}")
                    mark = chr(ord("a") + len(notes) - 1)
                    lines.append(f"  {r.src:<12} {r.dst:<12} {'n/a (' + mark + ')':>14} {r.samples:>8}")
                else:
                    lines.append(f"  {r.src:<12} {r.dst:<12} {r.rms:>14.{PRECISION}f} {r.samples:>8}")
            avg = self.averages[name]
            lines.append(f"  {'average':<25} {'n/a' if avg is None else format(avg, f'.{PRECISION}f'):>14}")
            for i, n in enumerate(notes):
                lines.append(f"  ({chr(ord('a') + i)}) {n}: no co-detections, not evaluable")
            lines.append("")
        return "\n".join(lines)


def parse_text(text: str) -> dict:
    """Read the numbers back from ``PairwiseReport.text`` as {table: {(src, dst) or 'average': value}}."""
    out, current = {}, None
    for line in text.splitlines():
        if line and not line.startswith(" "):
            current = line.split(" (")[0]
            out[current] = {}
            continue
        parts = line.split()
        if current is None or not parts or parts[0] in ("source",) or parts[0].startswith("("):
            continue
        if parts[0] == "average":
            out[current]["average"] = None if parts[1] == "n/a" else float(parts[1])
        else:
            out[current][(parts[0], parts[1])] = None if parts[2] == "n/a" else float(parts[2])
    return out


def sensor_pairs(dataset: Dataset, src_mod: str, dst_mod: str) -> list:
    src = [s.id for s in dataset.sensors if s.modality == src_mod]
    dst = [s.id for s in dataset.sensors if s.modality == dst_mod]
    if src_mod == dst_mod:
        return list(combinations(src, 2))
    return list(product(src, dst))


def report(dataset: Dataset, tree: TransformTree, pattern_poses: Optional[dict] = None,
           weights=None, longitudinal: str = "polyline") -> tuple[PairwiseReport, dict]:
    """Every pair of the five tables. Returns the report and the raw per-pair distances."""
    ev = Evaluator(dataset, tree, pattern_poses, weights, longitudinal)
    rows, raw = [], {}
    for name, ms, md, unit in TABLES:
        for src, dst in sensor_pairs(dataset, ms, md):
            res = ev.evaluate(src, dst)
            raw[(name, src, dst)] = res.distances
            rms = round(res.rms, PRECISION) if res.evaluable else None
            rows.append(PairRow(name, src, dst, rms, unit, len(res.distances), res.collections, res.excluded))
    return PairwiseReport(rows), raw
