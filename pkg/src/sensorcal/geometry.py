"""Rigid transforms, their 6-DOF parameterization, and the frame tree.

A transform ``T_ab`` maps points expressed in frame ``b`` into frame ``a``:
``p_a = R @ p_b + t``. Tree edges store ``parent_T_child``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

EDGE_KINDS = ("static", "optimized", "pattern")


class TreeError(ValueError):
    """Raised for malformed transformation trees or unknown frames."""


def hat(w):
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def exp_so3(rotvec) -> np.ndarray:
    w = np.asarray(rotvec, dtype=float)
    theta = math.sqrt(float(w @ w))
    K = hat(w)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / (theta * theta)
    return np.eye(3) + a * K + b * (K @ K)


def _quat_from_matrix(R: np.ndarray) -> np.ndarray:
    # Shepperd's method; returns (w, x, y, z) with w >= 0.
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    diag = (tr, R[0, 0], R[1, 1], R[2, 2])
    k = int(np.argmax(diag))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + R[0, 0] - R[1, 1] - R[2, 2], 0.0))
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 - R[0, 0] + R[1, 1] - R[2, 2], 0.0))
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * math.sqrt(max(1.0 - R[0, 0] - R[1, 1] + R[2, 2], 0.0))
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    q /= np.linalg.norm(q)
    if q[0] < 0:
        q = -q
    return q


def canonical_rotvec(rotvec) -> np.ndarray:
    """Wrap a rotation vector into the ball of radius pi.

    At exactly pi the representative whose first nonzero component is
    non-negative is chosen.
    """
    w = np.array(rotvec, dtype=float)
    theta = float(np.linalg.norm(w))
    if theta == 0.0:
        return w
    axis = w / theta
    theta = math.remainder(theta, 2.0 * math.pi)  # in [-pi, pi]
    if theta < 0:
        theta, axis = -theta, -axis
    if theta >= math.pi - 1e-15:
        theta = math.pi
        nz = axis[np.abs(axis) > 1e-15]
        if nz.size and nz[0] < 0:
            axis = -axis
    return axis * theta


def log_so3(R: np.ndarray) -> np.ndarray:
    q = _quat_from_matrix(np.asarray(R, dtype=float))
    v = q[1:]
    s = float(np.linalg.norm(v))
    if s < 1e-12:
        # 2*atan2(s, w)/s -> 2/w as s -> 0
        return v * (2.0 / q[0])
    theta = 2.0 * math.atan2(s, q[0])
    return canonical_rotvec(v / s * theta)


def rotation_angle(R: np.ndarray) -> float:
    return float(np.linalg.norm(log_so3(R)))


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        M = np.asarray(M, dtype=float)
        return cls(M[:3, :3], M[:3, 3])

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidTransform":
        return cls(exp_so3(rotvec), translation)

    def matrix(self) -> np.ndarray:
        M = np.eye(4)
        M[:3, :3] = self.rotation
        M[:3, 3] = self.translation
        return M

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return compose(self, other)

    def apply(self, points) -> np.ndarray:
        """Transform an (N, 3) array (or a single 3-vector)."""
        p = np.asarray(points, dtype=float)
        return p @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return bool(
            np.all(np.abs(R.T @ R - np.eye(3)) <= tol)
            and abs(np.linalg.det(R) - 1.0) <= tol
            and np.all(np.isfinite(self.translation))
        )

    def allclose(self, other: "RigidTransform", atol: float = 1e-9) -> bool:
        return bool(
            np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
            and np.allclose(self.translation, other.translation, rtol=0, atol=atol)
        )


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Return ``a * b``: apply ``b`` first, then ``a``."""
    return RigidTransform(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(T: RigidTransform) -> RigidTransform:
    return T.inverse()


def transform_error(a: RigidTransform, b: RigidTransform) -> tuple[float, float]:
    """Translation distance (m) and rotation angle (rad) between two transforms."""
    dt = float(np.linalg.norm(a.translation - b.translation))
    dr = rotation_angle(a.rotation @ b.rotation.T)
    return dt, dr


@dataclass(frozen=True)
class PoseParam:
    rotation_vector: np.ndarray
    translation: np.ndarray

    @classmethod
    def from_transform(cls, T: RigidTransform) -> "PoseParam":
        return cls(log_so3(T.rotation), T.translation.copy())

    @classmethod
    def from_vector(cls, v) -> "PoseParam":
        v = np.asarray(v, dtype=float)
        return cls(canonical_rotvec(v[:3]), v[3:6].copy())

    def to_transform(self) -> RigidTransform:
        return RigidTransform(exp_so3(self.rotation_vector), self.translation)

    def vector(self) -> np.ndarray:
        return np.concatenate([self.rotation_vector, self.translation])


def to_param(T: RigidTransform) -> np.ndarray:
    return PoseParam.from_transform(T).vector()


def from_param(v) -> RigidTransform:
    v = np.asarray(v, dtype=float)
    return RigidTransform(exp_so3(v[:3]), v[3:6])


@dataclass
class Edge:
    parent: str
    child: str
    transform: RigidTransform
    kind: str = "static"


class TransformTree:
    """Rooted frame tree. Every non-root frame has exactly one parent edge."""

    def __init__(self, root: str = "world", edges: Iterable[Edge] = ()):
        self.root = root
        self._edges = {}
        for e in edges:
            self.add_edge(e.parent, e.child, e.transform, e.kind)

    def add_edge(self, parent: str, child: str, transform: RigidTransform, kind: str = "static") -> None:
        if kind not in EDGE_KINDS:
            raise TreeError(f"edge {parent}->{child}: unknown kind {kind!r}")
        if child == self.root:
            raise TreeError(f"edge {parent}->{child}: root frame cannot have a parent")
        if child in self._edges:
            raise TreeError(f"frame {child!r} already has a parent edge")
        if kind == "pattern" and parent != self.root:
            raise TreeError(f"pattern edge {parent}->{child} must hang off {self.root!r}")
        self._edges[child] = Edge(parent, child, transform, kind)

    def remove_edge(self, child: str) -> None:
        del self._edges[child]

    @property
    def frames(self) -> set[str]:
        return {self.root} | set(self._edges)

    def edges(self) -> list[Edge]:
        return list(self._edges.values())

    def __iter__(self) -> Iterator[Edge]:
        return iter(self._edges.values())

    def has_frame(self, frame: str) -> bool:
        return frame == self.root or frame in self._edges

    def edge(self, child: str) -> Edge:
        try:
            return self._edges[child]
        except KeyError:
            raise TreeError(f"no edge with child frame {child!r}") from None

    def find_edge(self, parent: str, child: str) -> Edge:
        e = self._edges.get(child)
        if e is None or e.parent != parent:
            raise TreeError(f"no edge {parent}->{child}")
        return e

    def set_transform(self, child: str, T: RigidTransform) -> None:
        self.edge(child).transform = T

    def set_kind(self, child: str, kind: str) -> None:
        if kind not in EDGE_KINDS:
            raise TreeError(f"unknown edge kind {kind!r}")
        self.edge(child).kind = kind

    def copy(self) -> "TransformTree":
        return TransformTree(self.root, [Edge(e.parent, e.child, e.transform, e.kind) for e in self])

    def path(self, frame: str) -> list[Edge]:
        """Edges from the root down to ``frame``."""
        if frame == self.root:
            return []
        if frame not in self._edges:
            raise TreeError(f"unknown frame {frame!r}")
        out = []
        seen = set()
        cur = frame
        while cur != self.root:
            if cur in seen:
                raise TreeError(f"cycle in transformation tree through frame {cur!r}")
            seen.add(cur)
            e = self._edges.get(cur)
            if e is None:
                raise TreeError(f"frame {cur!r} is not connected to root {self.root!r}")
            out.append(e)
            cur = e.parent
        out.reverse()
        return out

    def validate(self) -> None:
        for child in self._edges:
            self.path(child)

    def chain_to(self, frame: str) -> RigidTransform:
        T = RigidTransform.identity()
        for e in self.path(frame):
            T = T @ e.transform
        return T

    def pattern_frame(self, collection_id: int) -> str:
        return pattern_frame_name(collection_id)


def pattern_frame_name(collection_id: int) -> str:
    return f"pattern_c{int(collection_id)}"


def chain_to(tree: TransformTree, frame: str) -> RigidTransform:
    return tree.chain_to(frame)


def sensor_to_pattern(tree: TransformTree, sensor, collection_id: int) -> RigidTransform:
    """``sensor_T_pattern`` for one collection; maps pattern points into the sensor frame."""
    pframe = pattern_frame_name(collection_id)
    if pframe not in tree.frames:
        raise TreeError(f"no pattern edge for collection {collection_id}")
    frame = sensor if isinstance(sensor, str) else sensor.data_frame
    return tree.chain_to(frame).inverse() @ tree.chain_to(pframe)


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> RigidTransform:
    """Pose of a camera-style frame (z forward, x right, y down) at ``position`` looking at ``target``."""
    p = np.asarray(position, dtype=float)
    z = np.asarray(target, dtype=float) - p
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [0.0, 1.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), p)
