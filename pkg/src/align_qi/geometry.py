"""Camera projection, ROI filtering and local pixel-to-3D map fitting.

Frames: the LiDAR/ego frame is right-handed with z up. Camera frames follow
the OpenCV convention (x right, y down, z forward). Images are rectified
pinhole; pixel (u, v) has u to the right and v down, with integer
coordinates at cell centres.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .errors import DegenerateConfiguration, SchemaError

RANK_TOL = 1e-8
ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class RegionOfInterest:
    x_min: float = -54.0
    x_max: float = 54.0
    y_min: float = -54.0
    y_max: float = 54.0
    z_min: float = -5.0
    z_max: float = 3.0

    def __post_init__(self):
        for lo, hi, axis in self._axes():
            if not lo < hi:
                raise SchemaError(f"roi: {axis}_min must be < {axis}_max")

    def _axes(self):
        return (
            (self.x_min, self.x_max, "x"),
            (self.y_min, self.y_max, "y"),
            (self.z_min, self.z_max, "z"),
        )

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.z_min])

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.x_max, self.y_max, self.z_max])

    @property
    def x_extent(self) -> float:
        return self.x_max - self.x_min

    def contains(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)

    def clamp(self, points) -> np.ndarray:
        return np.clip(np.asarray(points, dtype=float), self.lower, self.upper)

    def to_dict(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("x_min", "x_max", "y_min", "y_max", "z_min", "z_max")}

    @classmethod
    def from_dict(cls, d: dict) -> "RegionOfInterest":
        return cls(**{k: float(v) for k, v in d.items()})


@dataclass(frozen=True, eq=False)
class CameraCalibration:
    """Pinhole camera; ``extrinsic`` maps LiDAR-frame points into the camera frame."""

    intrinsics: np.ndarray
    extrinsic: np.ndarray
    image_width: int
    image_height: int
    camera_id: int = 0

    def __post_init__(self):
        problems = calibration_violations(
            self.intrinsics, self.extrinsic, self.image_width, self.image_height)
        if problems:
            raise SchemaError("; ".join(problems), problems)
        object.__setattr__(self, "intrinsics", np.asarray(self.intrinsics, dtype=float))
        object.__setattr__(self, "extrinsic", np.asarray(self.extrinsic, dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        return self.extrinsic[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.extrinsic[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Optical centre in the LiDAR frame."""
        return -self.rotation.T @ self.translation

    def to_camera(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return pts @ self.rotation.T + self.translation

    def pixel_rays(self, pixels) -> np.ndarray:
        """Unnormalised LiDAR-frame ray directions through the given pixels."""
        pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
        hom = np.column_stack([pix, np.ones(len(pix))])
        cam = np.linalg.solve(self.intrinsics, hom.T).T
        return cam @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, CameraCalibration):
            return NotImplemented
        return (self.camera_id == other.camera_id
                and self.image_width == other.image_width
                and self.image_height == other.image_height
                and np.array_equal(self.intrinsics, other.intrinsics)
                and np.array_equal(self.extrinsic, other.extrinsic))


def calibration_violations(intrinsics, extrinsic, width, height) -> list[str]:
    """Every invariant broken by a candidate calibration, as messages."""
    out = []
    K = np.asarray(intrinsics, dtype=float)
    E = np.asarray(extrinsic, dtype=float)
    if K.shape != (3, 3):
        out.append(f"intrinsics must be 3x3, got shape {K.shape}")
    elif not np.all(np.isfinite(K)):
        out.append("intrinsics contain non-finite values")
    elif K[0, 0] <= 0 or K[1, 1] <= 0:
        out.append("intrinsics focal lengths must be positive")
    if E.shape != (4, 4):
        out.append(f"extrinsic must be 4x4, got shape {E.shape}")
    elif not np.all(np.isfinite(E)):
        out.append("extrinsic contains non-finite values")
    else:
        R = E[:3, :3]
        if np.max(np.abs(R @ R.T - np.eye(3))) > ROTATION_TOL:
            out.append("rotation: extrinsic rotation block is not orthonormal")
        elif np.linalg.det(R) <= 0:
            out.append("rotation: extrinsic rotation block has negative determinant")
    if not (isinstance(width, (int, np.integer)) and width > 0):
        out.append(f"width must be a positive integer, got {width!r}")
    if not (isinstance(height, (int, np.integer)) and height > 0):
        out.append(f"height must be a positive integer, got {height!r}")
    return out


class ProjectedPoint(NamedTuple):
    source_index: int
    pixel: tuple[float, float]
    depth: float


class ProjectedCloud(NamedTuple):
    """Columnar form of a list of ProjectedPoint."""

    indices: np.ndarray  # (n,) int
    pixels: np.ndarray   # (n, 2) float
    depths: np.ndarray   # (n,) float

    def __len__(self):
        return len(self.indices)

    def to_list(self) -> list[ProjectedPoint]:
        return [ProjectedPoint(int(i), (float(p[0]), float(p[1])), float(d))
                for i, p, d in zip(self.indices, self.pixels, self.depths)]


def _project(points: np.ndarray, calib: CameraCalibration):
    cam = calib.to_camera(points)
    depth = cam[:, 2]
    in_front = depth > 0
    uvw = cam @ calib.intrinsics.T
    with np.errstate(divide="ignore", invalid="ignore"):
        pix = uvw[:, :2] / uvw[:, 2:3]
    u, v = pix[:, 0], pix[:, 1]
    ok = (in_front & (u >= 0) & (u < calib.image_width)
          & (v >= 0) & (v < calib.image_height))
    return ok, pix, depth


def project_point(p, calib: CameraCalibration) -> Optional[ProjectedPoint]:
    """Project one LiDAR-frame point; ``None`` when behind the camera or off-image."""
    ok, pix, depth = _project(np.asarray(p, dtype=float).reshape(1, 3), calib)
    if not ok[0]:
        return None
    return ProjectedPoint(0, (float(pix[0, 0]), float(pix[0, 1])), float(depth[0]))


def project_cloud(cloud, calib: CameraCalibration) -> ProjectedCloud:
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    ok, pix, depth = _project(pts, calib)
    idx = np.flatnonzero(ok)
    return ProjectedCloud(idx, pix[idx], depth[idx])


def back_project(pixel, depth, calib: CameraCalibration) -> np.ndarray:
    """Camera-frame point at ``depth`` along the ray through ``pixel``."""
    hom = np.array([pixel[0], pixel[1], 1.0])
    return np.linalg.solve(calib.intrinsics, hom) * depth


def filter_roi(cloud, roi: RegionOfInterest) -> tuple[np.ndarray, np.ndarray]:
    """Indices and points inside the closed ROI box, in input order."""
    pts = np.asarray(cloud, dtype=float).reshape(-1, 3)
    idx = np.flatnonzero(roi.contains(pts)) if len(pts) else np.zeros(0, dtype=int)
    return idx, pts[idx]


def estimate_homography(pixels, points) -> np.ndarray:
    """Least-squares 3x3 map H with H @ (u, v, 1) ~ (x, y, z).

    Needs at least three correspondences whose homogeneous pixels span rank 3.
    Pixels are normalised before solving to keep the system well conditioned.
    """
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    xyz = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(pix) != len(xyz):
        raise ValueError("pixels and points must have equal length")
    if len(pix) < 3:
        raise DegenerateConfiguration(f"need >= 3 correspondences, got {len(pix)}")

    A = np.column_stack([pix, np.ones(len(pix))])
    sv = np.linalg.svd(A, compute_uv=False)
    if not np.all(np.isfinite(sv)) or sv[-1] < RANK_TOL * sv[0]:
        raise DegenerateConfiguration("pixel support is rank deficient")

    mean = pix.mean(axis=0)
    scale = np.sqrt(2.0) / max(np.mean(np.linalg.norm(pix - mean, axis=1)), 1e-300)
    T = np.array([[scale, 0.0, -scale * mean[0]],
                  [0.0, scale, -scale * mean[1]],
                  [0.0, 0.0, 1.0]])
    An = A @ T.T
    Hn_t, *_ = np.linalg.lstsq(An, xyz, rcond=None)
    return Hn_t.T @ T


def apply_homography(h, pixel) -> np.ndarray:
    u, v = pixel
    return np.asarray(h, dtype=float) @ np.array([u, v, 1.0])
