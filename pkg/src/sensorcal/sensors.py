"""Pinhole camera model, depth back-projection, and the calibration board geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np


class BehindCameraError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    distortion: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)  # k1, k2, p1, p2, k3

    def __post_init__(self):
        object.__setattr__(self, "distortion", tuple(float(d) for d in self.distortion))
        if len(self.distortion) != 5:
            raise ValueError("distortion must have 5 coefficients (k1, k2, p1, p2, k3)")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def has_distortion(self) -> bool:
        return any(d != 0.0 for d in self.distortion)

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.atleast_2d(uv)
        return (uv[:, 0] >= 0) & (uv[:, 0] < self.width) & (uv[:, 1] >= 0) & (uv[:, 1] < self.height)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height, "distortion": list(self.distortion),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]), tuple(d.get("distortion", (0.0,) * 5)),
        )


def distort_normalized(intr: CameraIntrinsics, xy: np.ndarray) -> np.ndarray:
    k1, k2, p1, p2, k3 = intr.distortion
    x, y = xy[..., 0], xy[..., 1]
    r2 = x * x + y * y
    radial = 1.0 + r2 * (k1 + r2 * (k2 + r2 * k3))
    xd = x * radial + 2.0 * p1 * x * y + p2 * (r2 + 2.0 * x * x)
    yd = y * radial + p1 * (r2 + 2.0 * y * y) + 2.0 * p2 * x * y
    return np.stack([xd, yd], axis=-1)


def project_points(intr: CameraIntrinsics, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection. Returns (uv, valid) where valid marks z > 0.

    Invalid rows are projected with z replaced by 1 so the output stays finite.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    z = P[:, 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    xy = P[:, :2] / zs[:, None]
    if intr.has_distortion:
        xy = distort_normalized(intr, xy)
    uv = np.empty_like(xy)
    uv[:, 0] = intr.fx * xy[:, 0] + intr.cx
    uv[:, 1] = intr.fy * xy[:, 1] + intr.cy
    return uv, valid


def project(intr: CameraIntrinsics, p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p[2] <= 0:
        raise BehindCameraError(f"point {p.tolist()} is behind the camera (z <= 0)")
    uv, _ = project_points(intr, p[None, :])
    return uv[0]


def undistort_pixels(intr: CameraIntrinsics, uv: np.ndarray, iters: int = 20) -> np.ndarray:
    """Pixel coordinates -> normalized image coordinates (inverse of distortion)."""
    uv = np.atleast_2d(np.asarray(uv, dtype=float))
    xd = np.column_stack([(uv[:, 0] - intr.cx) / intr.fx, (uv[:, 1] - intr.cy) / intr.fy])
    if not intr.has_distortion:
        return xd
    xy = xd.copy()
    for _ in range(iters):
        # fixed-point refinement: x <- x + (xd - distort(x))
        xy = xy + (xd - distort_normalized(intr, xy))
    return xy


def backproject_depth_points(intr: CameraIntrinsics, pix_depth: np.ndarray) -> np.ndarray:
    """(N, 3) rows of (x_pix, y_pix, depth) -> (N, 3) camera-frame points.

    Distortion is ignored on purpose: depth rasters are taken as rectified.
    """
    a = np.atleast_2d(np.asarray(pix_depth, dtype=float))
    Z = a[:, 2]
    out = np.empty((a.shape[0], 3))
    out[:, 0] = (a[:, 0] - intr.cx) / intr.fx * Z
    out[:, 1] = (a[:, 1] - intr.cy) / intr.fy * Z
    out[:, 2] = Z
    return out


def backproject_depth(intr: CameraIntrinsics, pixel, depth: float) -> np.ndarray:
    d = float(depth)
    if not math.isfinite(d) or d <= 0:
        raise InvalidDepthError(f"invalid depth {depth!r} at pixel {tuple(pixel)}")
    x, y = float(pixel[0]), float(pixel[1])
    if not (0 <= x < intr.width and 0 <= y < intr.height):
        raise ValueError(f"pixel {tuple(pixel)} outside image {intr.width}x{intr.height}")
    return backproject_depth_points(intr, np.array([[x, y, d]]))[0]


@dataclass(frozen=True)
class PatternSpec:
    """Chessboard-like board. Origin at the first inner corner, z out of the face."""

    nx: int
    ny: int
    square: float
    border_width: float = 0.0
    border_height: float = 0.0
    boundary_sample_step: float = 0.01

    def __post_init__(self):
        if self.nx < 2 or self.ny < 2:
            raise ValueError("pattern needs at least 2x2 inner corners")
        if self.square <= 0:
            raise ValueError("square size must be positive")
        if not (0 < self.boundary_sample_step <= self.square):
            raise ValueError("boundary_sample_step must be in (0, square]")

    @property
    def n_corners(self) -> int:
        return self.nx * self.ny

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """Physical board rectangle (xmin, xmax, ymin, ymax) in the pattern frame."""
        return (
            -self.border_width,
            (self.nx - 1) * self.square + self.border_width,
            -self.border_height,
            (self.ny - 1) * self.square + self.border_height,
        )

    @property
    def size(self) -> tuple[float, float]:
        x0, x1, y0, y1 = self.extent
        return x1 - x0, y1 - y0

    @property
    def center(self) -> np.ndarray:
        x0, x1, y0, y1 = self.extent
        return np.array([(x0 + x1) / 2, (y0 + y1) / 2, 0.0])

    def rectangle(self) -> np.ndarray:
        """The four physical corners, counter-clockwise, z = 0."""
        x0, x1, y0, y1 = self.extent
        return np.array([[x0, y0, 0.0], [x1, y0, 0.0], [x1, y1, 0.0], [x0, y1, 0.0]])

    def to_dict(self) -> dict:
        return {
            "nx": self.nx, "ny": self.ny, "square": self.square,
            "border_width": self.border_width, "border_height": self.border_height,
            "boundary_sample_step": self.boundary_sample_step,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatternSpec":
        return cls(
            int(d["nx"]), int(d["ny"]), float(d["square"]),
            float(d.get("border_width", 0.0)), float(d.get("border_height", 0.0)),
            float(d.get("boundary_sample_step", 0.01)),
        )


@lru_cache(maxsize=32)
def _corner_points(spec: PatternSpec) -> np.ndarray:
    j, i = np.mgrid[0:spec.ny, 0:spec.nx]
    pts = np.column_stack([i.ravel() * spec.square, j.ravel() * spec.square, np.zeros(spec.n_corners)])
    pts.setflags(write=False)
    return pts


def corner_points(spec: PatternSpec) -> np.ndarray:
    """Inner corners, row-major; row index ``k`` is corner id ``k``."""
    return _corner_points(spec)


def sample_perimeter(spec: PatternSpec, step: float) -> np.ndarray:
    corners = spec.rectangle()
    out = []
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        length = float(np.linalg.norm(b - a))
        n = max(1, int(math.ceil(length / step - 1e-9)))
        s = np.arange(n) / n
        out.append(a + s[:, None] * (b - a))
    return np.vstack(out)


@lru_cache(maxsize=32)
def _boundary_samples(spec: PatternSpec) -> np.ndarray:
    pts = sample_perimeter(spec, spec.boundary_sample_step)
    pts.setflags(write=False)
    return pts


def boundary_samples(spec: PatternSpec) -> np.ndarray:
    """Points along the physical perimeter, every ``boundary_sample_step``, rectangle corners included.

    Each side is split into ceil(length / step) equal pieces so the corners
    land on the sample grid.
    """
    return _boundary_samples(spec)
