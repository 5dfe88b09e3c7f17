"""On-disk dataset: sensors, frame tree, collections and their labels.

Layout of a dataset directory::

    dataset.json              metadata and labels (see ``SCHEMA_VERSION``)
    clouds/<c>_<sensor>.bin   float32 little-endian records (x, y, z, ring)
    depth/<c>_<sensor>.bin    16-byte header (width, height as uint32 LE, 8 reserved)
                              followed by float32 LE depth, row-major, NaN = invalid

Range labels are stored per modality: LiDAR rows are (x, y, z) in the sensor
frame, depth rows are (x_pix, y_pix, depth) and are lifted to 3D on use.
"""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .geometry import RigidTransform, TransformTree, TreeError
from .sensors import CameraIntrinsics, PatternSpec

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MODALITIES = ("rgb", "depth", "lidar3d")
PARTIAL_THRESHOLD = 0.25


class DatasetError(ValueError):
    """Schema or invariant violation. ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def min_corners(spec: PatternSpec) -> int:
    return int(math.ceil(PARTIAL_THRESHOLD * spec.n_corners))


@dataclass
class SensorSpec:
    id: str
    modality: str
    data_frame: str
    calibrated_edge: tuple[str, str]
    intrinsics: Optional[CameraIntrinsics] = None
    anchored: bool = False

    def __post_init__(self):
        self.calibrated_edge = tuple(self.calibrated_edge)

    @property
    def is_camera(self) -> bool:
        return self.modality in ("rgb", "depth")


@dataclass
class RgbDetection:
    ids: np.ndarray  # (N,) int corner ids
    uv: np.ndarray  # (N, 2) pixels
    partial: bool = False

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)

    def __len__(self):
        return len(self.ids)


@dataclass
class RangeDetection:
    inside: np.ndarray
    boundary: np.ndarray

    def __post_init__(self):
        self.inside = np.asarray(self.inside, dtype=float).reshape(-1, 3)
        self.boundary = np.asarray(self.boundary, dtype=float).reshape(-1, 3)


Detection = Union[RgbDetection, RangeDetection]


@dataclass
class Collection:
    id: int
    detections: dict = field(default_factory=dict)  # sensor id -> Detection
    raw: dict = field(default_factory=dict)  # sensor id -> relative sidecar path
    limits: dict = field(default_factory=dict)  # sensor id -> (K, 2) physical-limit polygon in pixels

    def complete(self, sensor_ids) -> bool:
        return all(self.detections.get(s) is not None for s in sensor_ids)


@dataclass
class Dataset:
    pattern: PatternSpec
    tree: TransformTree
    sensors: list
    collections: list
    meta: dict = field(default_factory=dict)
    base_dir: Optional[Path] = None
    raw_cache: dict = field(default_factory=dict)  # relative path -> ndarray

    def sensor(self, sid: str) -> SensorSpec:
        for s in self.sensors:
            if s.id == sid:
                return s
        raise KeyError(f"unknown sensor {sid!r}")

    @property
    def sensor_ids(self) -> list[str]:
        return [s.id for s in self.sensors]

    def collection(self, cid: int) -> Collection:
        for c in self.collections:
            if c.id == cid:
                return c
        raise KeyError(f"unknown collection {cid}")

    def is_complete(self, c: Collection) -> bool:
        return c.complete(self.sensor_ids)

    def load_raw(self, cid: int, sid: str) -> Optional[np.ndarray]:
        rel = self.collection(cid).raw.get(sid)
        if rel is None:
            return None
        if rel in self.raw_cache:
            return self.raw_cache[rel]
        if self.base_dir is None:
            raise FileNotFoundError(rel)
        path = self.base_dir / rel
        arr = read_depth(path) if self.sensor(sid).modality == "depth" else read_cloud(path)
        self.raw_cache[rel] = arr
        return arr


# ----------------------------------------------------------------------------
# binary sidecars


def write_cloud(path, cloud: np.ndarray) -> None:
    """``cloud`` is (N, 4): x, y, z, ring."""
    data = np.ascontiguousarray(np.asarray(cloud, dtype="<f4").reshape(-1, 4))
    atomic_write_bytes(path, data.tobytes())


def read_cloud(path) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if raw.size % 4:
        raise DatasetError(str(path), "point cloud size is not a multiple of 4 floats")
    return raw.reshape(-1, 4).astype(float)


def write_depth(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype="<f4")
    h, w = img.shape
    header = np.array([w, h], dtype="<u4").tobytes() + bytes(8)
    atomic_write_bytes(path, header + np.ascontiguousarray(img).tobytes())


def read_depth(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h = np.frombuffer(buf[:8], dtype="<u4")
    data = np.frombuffer(buf[16:], dtype="<f4")
    if data.size != int(w) * int(h):
        raise DatasetError(str(path), f"depth raster has {data.size} values, header says {w}x{h}")
    return data.reshape(int(h), int(w)).astype(float)


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dumps(doc) -> str:
    return json.dumps(doc, indent=1, allow_nan=False) + "\n"


# ----------------------------------------------------------------------------
# (de)serialization


def tree_to_doc(tree: TransformTree) -> dict:
    return {
        "root": tree.root,
        "edges": [
            {
                "parent": e.parent,
                "child": e.child,
                "kind": e.kind,
                "rotation": e.transform.rotation.tolist(),
                "translation": e.transform.translation.tolist(),
            }
            for e in tree
        ],
    }


def tree_from_doc(doc: dict, path: str = "tree") -> TransformTree:
    _require(doc, ("root", "edges"), path)
    tree = TransformTree(str(doc["root"]))
    for i, e in enumerate(doc["edges"]):
        p = f"{path}.edges[{i}]"
        _require(e, ("parent", "child", "rotation", "translation"), p)
        try:
            T = RigidTransform(np.array(e["rotation"], dtype=float), np.array(e["translation"], dtype=float))
        except (ValueError, TypeError) as exc:
            raise DatasetError(p, f"bad transform: {exc}") from None
        if not T.is_valid(1e-6):
            raise DatasetError(f"{p}.rotation", "not a proper rotation matrix")
        try:
            tree.add_edge(str(e["parent"]), str(e["child"]), T, e.get("kind", "static"))
        except TreeError as exc:
            raise DatasetError(p, str(exc)) from None
    try:
        tree.validate()
    except TreeError as exc:
        raise DatasetError(path, str(exc)) from None
    return tree


def _require(doc, keys, path):
    if not isinstance(doc, dict):
        raise DatasetError(path, "expected an object")
    for k in keys:
        if k not in doc:
            raise DatasetError(f"{path}.{k}", "missing required field")


def detection_to_doc(det: Detection) -> dict:
    if isinstance(det, RgbDetection):
        return {
            "type": "rgb",
            "partial": bool(det.partial),
            "corners": [[int(i), float(u), float(v)] for i, (u, v) in zip(det.ids, det.uv)],
        }
    return {"type": "range", "inside": det.inside.tolist(), "boundary": det.boundary.tolist()}


def _detection_from_doc(d: dict, sensor: SensorSpec, spec: PatternSpec, path: str) -> Detection:
    if sensor.modality == "rgb":
        _require(d, ("corners",), path)
        corners = np.array(d["corners"], dtype=float).reshape(-1, 3)
        ids = corners[:, 0].astype(np.int64)
        if len(set(ids.tolist())) != len(ids):
            raise DatasetError(f"{path}.corners", "duplicate corner ids")
        if len(ids) and (ids.min() < 0 or ids.max() >= spec.n_corners):
            raise DatasetError(f"{path}.corners", f"corner id out of range [0, {spec.n_corners})")
        if len(ids) < min_corners(spec):
            raise DatasetError(
                f"{path}.corners", f"{len(ids)} corners is below the 25% threshold ({min_corners(spec)})"
            )
        partial = bool(d.get("partial", len(ids) < spec.n_corners))
        return RgbDetection(ids, corners[:, 1:3], partial)
    _require(d, ("inside", "boundary"), path)
    det = RangeDetection(np.array(d["inside"], dtype=float), np.array(d["boundary"], dtype=float))
    if len(det.inside) == 0 or len(det.boundary) == 0:
        raise DatasetError(path, "range detection needs non-empty inside and boundary sets")
    if not (np.all(np.isfinite(det.inside)) and np.all(np.isfinite(det.boundary))):
        raise DatasetError(path, "non-finite label coordinates")
    return det


def sensor_to_doc(s: SensorSpec) -> dict:
    d = {
        "id": s.id,
        "modality": s.modality,
        "data_frame": s.data_frame,
        "calibrated_edge": list(s.calibrated_edge),
        "anchored": bool(s.anchored),
    }
    if s.intrinsics is not None:
        d["intrinsics"] = s.intrinsics.to_dict()
    return d


def dataset_to_doc(d: Dataset) -> dict:
    cols = []
    for c in d.collections:
        cols.append({
            "id": int(c.id),
            "detections": {sid: detection_to_doc(det) for sid, det in c.detections.items() if det is not None},
            "raw": dict(c.raw),
            "limits": {sid: np.asarray(p, dtype=float).tolist() for sid, p in c.limits.items()},
        })
    return {
        "version": SCHEMA_VERSION,
        "pattern": d.pattern.to_dict(),
        "tree": tree_to_doc(d.tree),
        "sensors": [sensor_to_doc(s) for s in d.sensors],
        "collections": cols,
        "meta": d.meta,
    }


def check_sensor_chain(tree: TransformTree, s: SensorSpec, path: str = "sensors") -> None:
    parent, child = s.calibrated_edge
    try:
        chain = tree.path(s.data_frame)
    except TreeError as exc:
        raise DatasetError(f"{path}.data_frame", str(exc)) from None
    if not any(e.parent == parent and e.child == child for e in chain):
        raise DatasetError(
            f"{path}.calibrated_edge",
            f"edge {parent}->{child} is not on the {tree.root}->{s.data_frame} chain",
        )


def dataset_from_doc(doc: dict, base_dir=None) -> Dataset:
    _require(doc, ("version", "pattern", "tree", "sensors", "collections"), "$")
    if doc["version"] != SCHEMA_VERSION:
        raise DatasetError("version", f"unsupported schema version {doc['version']!r}")
    try:
        spec = PatternSpec.from_dict(doc["pattern"])
    except (KeyError, ValueError, TypeError) as exc:
        raise DatasetError("pattern", str(exc)) from None
    tree = tree_from_doc(doc["tree"])
    sensors = []
    seen = set()
    for i, sd in enumerate(doc["sensors"]):
        p = f"sensors[{i}]"
        _require(sd, ("id", "modality", "data_frame", "calibrated_edge"), p)
        if sd["modality"] not in MODALITIES:
            raise DatasetError(f"{p}.modality", f"unknown modality {sd['modality']!r}")
        if sd["id"] in seen:
            raise DatasetError(f"{p}.id", f"duplicate sensor id {sd['id']!r}")
        seen.add(sd["id"])
        intr = None
        if sd["modality"] in ("rgb", "depth"):
            if "intrinsics" not in sd:
                raise DatasetError(f"{p}.intrinsics", "camera sensors need intrinsics")
            try:
                intr = CameraIntrinsics.from_dict(sd["intrinsics"])
            except (KeyError, ValueError, TypeError) as exc:
                raise DatasetError(f"{p}.intrinsics", str(exc)) from None
        s = SensorSpec(str(sd["id"]), sd["modality"], str(sd["data_frame"]),
                       tuple(sd["calibrated_edge"]), intr, bool(sd.get("anchored", False)))
        check_sensor_chain(tree, s, p)
        sensors.append(s)
    by_id = {s.id: s for s in sensors}
    collections = []
    dropped = 0
    cids = set()
    for i, cd in enumerate(doc["collections"]):
        p = f"collections[{i}]"
        _require(cd, ("id", "detections"), p)
        cid = int(cd["id"])
        if cid in cids:
            raise DatasetError(f"{p}.id", f"duplicate collection id {cid}")
        cids.add(cid)
        dets = {}
        for sid, dd in cd["detections"].items():
            if sid not in by_id:
                raise DatasetError(f"{p}.detections.{sid}", "unknown sensor")
            if dd is None:
                continue
            dets[sid] = _detection_from_doc(dd, by_id[sid], spec, f"{p}.detections.{sid}")
        if not dets:
            dropped += 1
            continue
        limits = {sid: np.array(v, dtype=float).reshape(-1, 2) for sid, v in cd.get("limits", {}).items()}
        collections.append(Collection(cid, dets, dict(cd.get("raw", {})), limits))
    if dropped:
        log.warning("dropped %d collection(s) without detections", dropped)
    meta = dict(doc.get("meta", {}))
    meta["dropped_on_load"] = dropped
    return Dataset(spec, tree, sensors, collections, meta, Path(base_dir) if base_dir else None)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DatasetError("$", f"invalid JSON: {exc}") from None
    return dataset_from_doc(doc, path.parent)


def save_dataset(d: Dataset, path) -> None:
    """Write the JSON document and any in-memory sidecars next to it."""
    path = Path(path)
    base = path.parent
    for c in d.collections:
        for sid, rel in c.raw.items():
            arr = d.raw_cache.get(rel)
            if arr is None:
                continue
            if d.sensor(sid).modality == "depth":
                write_depth(base / rel, arr)
            else:
                write_cloud(base / rel, arr)
    meta = {k: v for k, v in d.meta.items() if k != "dropped_on_load"}
    doc = dataset_to_doc(d)
    doc["meta"] = meta
    atomic_write_text(path, dumps(doc))


@dataclass
class StatsReport:
    collections: int
    detections: dict  # sensor id -> count
    rgb_partials: int
    complete: int

    def to_dict(self) -> dict:
        return {
            "collections": self.collections,
            "detections": dict(self.detections),
            "rgb_partials": self.rgb_partials,
            "complete": self.complete,
        }

    def table(self) -> str:
        lines = [f"{'# collections':>14} {'# RGB partials':>15} {'# complete':>11}",
                 f"{self.collections:>14} {self.rgb_partials:>15} {self.complete:>11}", ""]
        lines += [f"  {sid:<12} {n:>4} detections" for sid, n in self.detections.items()]
        return "\n".join(lines)


def dataset_stats(d: Dataset) -> StatsReport:
    counts = {s.id: 0 for s in d.sensors}
    partials = 0
    complete = 0
    for c in d.collections:
        for sid, det in c.detections.items():
            if det is None:
                continue
            counts[sid] += 1
            if isinstance(det, RgbDetection) and det.partial:
                partials += 1
        complete += d.is_complete(c)
    return StatsReport(len(d.collections), counts, partials, complete)
