"""Pinhole cameras: world-to-camera transform, perspective projection,
and the per-scene camera JSON file.

The extrinsics map world to camera coordinates (p_cam = R @ p + T); the
camera looks down +Z.  Projection is x = X/Z * fx + cx, y = Y/Z * fy + cy.
Invalid projections (behind the camera or off-screen) are data, not errors:
coordinates are clamped to the image rectangle and flagged.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import CameraFormatError

Z_NEAR = 1e-6
_BOUNDS_TOL = 1e-9


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
            raise CameraFormatError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise CameraFormatError(f"image extent must be positive, got {self.width}x{self.height}")


class CameraExtrinsics:
    """Rotation (row-major 3x3) and translation mapping world to camera."""

    def __init__(self, R, T):
        R = np.asarray(R, dtype=np.float64).reshape(3, 3)
        T = np.asarray(T, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6):
            raise CameraFormatError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise CameraFormatError(f"rotation determinant {np.linalg.det(R):.8f} != 1")
        self.R = R
        self.T = T
        self.R.flags.writeable = False
        self.T.flags.writeable = False


@dataclass
class View:
    """One posed image: camera plus the multi-resolution feature pyramid."""

    intrinsics: CameraIntrinsics
    extrinsics: CameraExtrinsics
    pyramid: list = field(default_factory=list)   # Tensors (C_l, H_l, W_l)
    strides: tuple = (1, 2, 4)
    image: np.ndarray | None = None               # raw (C, H, W) when pyramid comes from the backbone

    def check_pyramid(self):
        for level, stride in zip(self.pyramid, self.strides):
            eh = math.ceil(self.intrinsics.height / stride)
            ew = math.ceil(self.intrinsics.width / stride)
            if level.shape[1] != eh or level.shape[2] != ew:
                raise CameraFormatError(
                    f"pyramid level stride {stride}: expected {eh}x{ew}, got "
                    f"{level.shape[1]}x{level.shape[2]}")


def world_to_camera(p, extrinsics):
    """R @ p + T for a single 3-vector."""
    return extrinsics.R @ np.asarray(p, dtype=np.float64) + extrinsics.T


def project(p_cam, intrinsics):
    """Perspective projection of one camera-space point -> (x, y, valid)."""
    x_arr, y_arr, valid = project_points_np(np.asarray(p_cam, dtype=np.float64)[None, :],
                                            intrinsics, None)
    return float(x_arr[0]), float(y_arr[0]), bool(valid[0])


def _bounds_valid(x, y, z, intr):
    return (
        (z > Z_NEAR)
        & (x >= -_BOUNDS_TOL) & (x <= intr.width - 1 + _BOUNDS_TOL)
        & (y >= -_BOUNDS_TOL) & (y <= intr.height - 1 + _BOUNDS_TOL)
    )


def project_points_np(points, intrinsics, extrinsics):
    """Project (K, 3) world points; returns (x, y, valid) with off-screen or
    behind-camera coordinates clamped to the image rectangle and flagged."""
    points = np.asarray(points, dtype=np.float64)
    if extrinsics is not None:
        cam = points @ extrinsics.R.T + extrinsics.T
    else:
        cam = points
    z = cam[:, 2]
    zc = np.maximum(z, Z_NEAR)
    x = cam[:, 0] / zc * intrinsics.fx + intrinsics.cx
    y = cam[:, 1] / zc * intrinsics.fy + intrinsics.cy
    valid = _bounds_valid(x, y, z, intrinsics)
    return (np.clip(x, 0, intrinsics.width - 1), np.clip(y, 0, intrinsics.height - 1), valid)


def project_points(points, view):
    """Spec surface: project via a View's camera."""
    return project_points_np(points, view.intrinsics, view.extrinsics)


def project_points_t(points, intrinsics, extrinsics):
    """Differentiable projection of a (K, 3) tensor -> (x, y, valid).

    x and y are clamped (K,) tensors; valid is a constant boolean mask.
    Gradients flow to the points wherever the projection is not clamped.
    """
    rt = ad.tensor(extrinsics.R.T.copy(), dtype=points.dtype)
    t = ad.tensor(extrinsics.T, dtype=points.dtype)
    cam = ad.add(ad.matmul(points, rt), t)
    xs = ad.reshape(ad.narrow(cam, 1, 0, 1), (-1,))
    ys = ad.reshape(ad.narrow(cam, 1, 1, 1), (-1,))
    zs = ad.reshape(ad.narrow(cam, 1, 2, 1), (-1,))
    zc = ad.clamp(zs, lo=Z_NEAR)
    x = ad.add(ad.scale(ad.div(xs, zc), intrinsics.fx),
               ad.tensor(np.full(1, intrinsics.cx), dtype=points.dtype))
    y = ad.add(ad.scale(ad.div(ys, zc), intrinsics.fy),
               ad.tensor(np.full(1, intrinsics.cy), dtype=points.dtype))
    valid = _bounds_valid(x.data, y.data, zs.data, intrinsics)
    return (ad.clamp(x, 0.0, float(intrinsics.width - 1)),
            ad.clamp(y, 0.0, float(intrinsics.height - 1)),
            valid)


# ---------------------------------------------------------------------------
# camera JSON

def save_cameras(path, cameras):
    views = []
    for intr, ext in cameras:
        views.append({
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
            "R": [float(v) for v in ext.R.reshape(-1)],
            "T": [float(v) for v in ext.T],
        })
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({"views": views}, fh, indent=1)
        fh.write("\n")


def load_cameras(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CameraFormatError(f"{path}: invalid JSON ({exc})") from None
    if "views" not in doc or not isinstance(doc["views"], list):
        raise CameraFormatError(f"{path}: missing 'views' list")
    cameras = []
    for i, v in enumerate(doc["views"]):
        try:
            intr = CameraIntrinsics(fx=float(v["fx"]), fy=float(v["fy"]),
                                    cx=float(v["cx"]), cy=float(v["cy"]),
                                    width=int(v["width"]), height=int(v["height"]))
            ext = CameraExtrinsics(v["R"], v["T"])
        except KeyError as exc:
            raise CameraFormatError(f"{path}: view {i} missing key {exc}") from None
        cameras.append((intr, ext))
    return cameras


def look_at(eye, target, up=(0.0, 0.0, 1.0)):
    """Extrinsics for a camera at `eye` looking toward `target` (+Z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    nr = np.linalg.norm(right)
    if nr < 1e-12:  # looking along `up`: pick any perpendicular right vector
        right = np.cross(fwd, np.array([1.0, 0.0, 0.0]))
        nr = np.linalg.norm(right)
    right = right / nr
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return CameraExtrinsics(R, -R @ eye)
