"""Pinhole camera model: intrinsics, projection and back-projection."""

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, InvalidDepthError


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def halved(self) -> "CameraIntrinsics":
        """Intrinsics of the next pyramid level: all four parameters scaled by 0.5."""
        return CameraIntrinsics(
            fx=self.fx * 0.5,
            fy=self.fy * 0.5,
            cx=self.cx * 0.5,
            cy=self.cy * 0.5,
            width=self.width // 2,
            height=self.height // 2,
        )

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def backproject(u: float, v: float, d: float, k: CameraIntrinsics) -> np.ndarray:
    """Pixel (u, v) at depth d (meters) to a camera-frame 3D point."""
    if d <= 0:
        raise InvalidDepthError(f"depth must be positive, got {d}")
    return np.array([(u - k.cx) * d / k.fx, (v - k.cy) * d / k.fy, d])


def project(p: np.ndarray, k: CameraIntrinsics) -> tuple[float, float]:
    """Camera-frame point to pixel coordinates. Caller checks image bounds."""
    x, y, z = p
    if z <= 0:
        raise BehindCameraError(f"point behind camera, z = {z}")
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy)


def backproject_grid(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """Back-project a full depth map to an (H, W, 3) camera-frame point map.

    Invalid pixels (depth == 0) produce zero points; mask with depth > 0.
    """
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    xs = (u[None, :] - k.cx) / k.fx
    ys = (v[:, None] - k.cy) / k.fy
    pts = np.empty((h, w, 3))
    pts[..., 0] = xs * depth
    pts[..., 1] = ys * depth
    pts[..., 2] = depth
    return pts


def project_points(points: np.ndarray, k: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Project (N, 3) camera-frame points.

    Returns (uv, in_front) where uv is (N, 2); entries with z <= 0 are
    left non-finite and flagged False.
    """
    pts = np.asarray(points, dtype=np.float64)
    z = pts[..., 2]
    in_front = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * pts[..., 0] / z + k.cx
        v = k.fy * pts[..., 1] / z + k.cy
    uv = np.stack([u, v], axis=-1)
    uv[~in_front] = np.nan
    return uv, in_front


def in_bounds(uv: np.ndarray, k: CameraIntrinsics, margin: float = 0.0) -> np.ndarray:
    """Boolean mask of (N, 2) pixel coords inside the image (optionally shrunk)."""
    u, v = uv[..., 0], uv[..., 1]
    with np.errstate(invalid="ignore"):
        return (
            (u >= margin)
            & (u <= k.width - 1 - margin)
            & (v >= margin)
            & (v <= k.height - 1 - margin)
        )
