"""Camera models, rig poses, and rig perturbations.

Coordinate conventions used throughout the package:

World frame (right-handed):
  - X: forward (driving direction)
  - Y: left
  - Z: up
  - Ground plane: Z = 0

Camera frame (right-handed, standard computer vision):
  - X: right (in image)
  - Y: down (in image)
  - Z: forward (optical axis)

Image frame:
  - origin at the top-left pixel center, x right, y down, units in pixels
  - pixel (i, j) is sampled at the integer coordinate (i, j)

Depth always means the camera-frame Z coordinate of a surface point
(distance along the optical axis), in meters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

ROTATION_TOL = 1e-9


class OutOfFovError(ValueError):
    """Ray incidence angle exceeds the lens field of view."""


def _rot_x(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _rot_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigPose:
    """Rigid transform: rotation is world-from-camera, translation is the
    camera center in world coordinates (meters).

    Also used as a generic SE(3) transform (e.g. the output of
    :func:`relative_pose`), where it maps points of one frame into another.
    """

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(t)):
            raise ValueError("pose contains non-finite values")
        err = np.abs(R.T @ R - np.eye(3)).max()
        if err > ROTATION_TOL:
            raise ValueError(f"rotation is not orthonormal (|R'R - I| = {err:.3e})")
        det = np.linalg.det(R)
        if abs(det - 1.0) > ROTATION_TOL:
            raise ValueError(f"rotation determinant {det:.12f} != +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigPose":
        return RigPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(mat: np.ndarray) -> "RigPose":
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape != (4, 4):
            raise ValueError(f"expected 4x4 matrix, got {mat.shape}")
        return RigPose(mat[:3, :3], mat[:3, 3])

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous world-from-camera matrix."""
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def inverse(self) -> "RigPose":
        return RigPose(self.rotation.T, -self.rotation.T @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points (..., 3) from camera frame to world frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Transform world points (..., 3) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


def front_camera_pose(height: float = 2.0) -> RigPose:
    """Canonical forward-facing camera: optical axis along world +X,
    image x along world -Y (right), image y along world -Z (down)."""
    R = np.array([
        [0.0, 0.0, 1.0],
        [-1.0, 0.0, 0.0],
        [0.0, -1.0, 0.0],
    ])
    return RigPose(R, np.array([0.0, 0.0, float(height)]))


def compose(first: RigPose, second: RigPose) -> RigPose:
    """Composite transform that applies `first`, then `second`."""
    return RigPose(second.rotation @ first.rotation,
                   second.rotation @ first.translation + second.translation)


def relative_pose(a: RigPose, b: RigPose) -> RigPose:
    """b-from-a transform: maps points in a's camera frame into b's.

    relative_pose(a, a) is the identity, and
    compose(relative_pose(a, b), relative_pose(b, c)) == relative_pose(a, c).
    """
    R = b.rotation.T @ a.rotation
    t = b.rotation.T @ (a.translation - b.translation)
    return RigPose(R, t)


@dataclass(frozen=True)
class RigPerturbation:
    """Rig change relative to a base pose.

    d_pitch: degrees about the camera X axis (positive tilts the optical
        axis upward); d_yaw: degrees about world Z. Both rotate about the
        camera center, pitch applied before yaw.
    d_height: meters along world +Z; d_depth: meters along world +X.
    """

    d_pitch: float = 0.0
    d_yaw: float = 0.0
    d_height: float = 0.0
    d_depth: float = 0.0

    def __post_init__(self):
        vals = (self.d_pitch, self.d_yaw, self.d_height, self.d_depth)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("perturbation components must be finite")

    def negated(self) -> "RigPerturbation":
        return RigPerturbation(-self.d_pitch, -self.d_yaw, -self.d_height, -self.d_depth)

    def is_zero(self) -> bool:
        return self.d_pitch == 0 and self.d_yaw == 0 and self.d_height == 0 and self.d_depth == 0

    def label(self) -> str:
        parts = []
        if self.d_pitch:
            parts.append(f"pitch{self.d_pitch:+g}")
        if self.d_yaw:
            parts.append(f"yaw{self.d_yaw:+g}")
        if self.d_height:
            parts.append(f"height{self.d_height:+g}")
        if self.d_depth:
            parts.append(f"depth{self.d_depth:+g}")
        return "_".join(parts) if parts else "identity"


def perturb_rig(pose: RigPose, p: RigPerturbation) -> RigPose:
    """Apply a rig perturbation about the camera center.

    Pitch rotates about the camera X axis (intrinsic, right-multiplied),
    yaw about world Z (extrinsic, left-multiplied); the camera center is
    then shifted by (d_depth, 0, d_height) in world axes.
    """
    R = _rot_z(math.radians(p.d_yaw)) @ pose.rotation @ _rot_x(math.radians(p.d_pitch))
    t = pose.translation + np.array([p.d_depth, 0.0, p.d_height])
    return RigPose(R, t)


@dataclass(frozen=True)
class PinholeIntrinsics:
    """Ideal pinhole model: pixel = (fx*x/z + cx, fy*y/z + cy)."""

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

    @staticmethod
    def from_hfov(width: int, height: int, hfov_deg: float) -> "PinholeIntrinsics":
        """Square-pixel model with the given horizontal field of view."""
        fx = (width / 2.0) / math.tan(math.radians(hfov_deg) / 2.0)
        return PinholeIntrinsics(fx=fx, fy=fx, cx=(width - 1) / 2.0,
                                 cy=(height - 1) / 2.0, width=width, height=height)

    def hfov_deg(self) -> float:
        return math.degrees(2.0 * math.atan((self.width / 2.0) / self.fx))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def from_dict(d: dict) -> "PinholeIntrinsics":
        return PinholeIntrinsics(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                                 width=int(d["width"]), height=int(d["height"]))


@dataclass(frozen=True)
class FThetaIntrinsics:
    """f-theta fisheye: image radius r(theta) = sum_i poly[i] * theta**i,
    where theta is the ray's incidence angle to the optical axis (radians).

    poly must satisfy poly[0] == 0 and be strictly increasing on
    [0, max_fov / 2].
    """

    poly: tuple
    cx: float
    cy: float
    width: int
    height: int
    max_fov: float  # full field of view, radians

    _r_max: float = field(init=False, repr=False, compare=False, default=0.0)

    def __post_init__(self):
        poly = tuple(float(c) for c in self.poly)
        if len(poly) != 5:
            raise ValueError("poly must have 5 coefficients c0..c4")
        if poly[0] != 0.0:
            raise ValueError("c0 must be 0 so that r(0) = 0")
        if not (0 < self.max_fov <= math.pi * 2):
            raise ValueError("max_fov out of range")
        object.__setattr__(self, "poly", poly)
        thetas = np.linspace(0.0, self.max_fov / 2.0, 1000)
        r = self.radius(thetas)
        if np.any(np.diff(r) <= 0):
            raise ValueError("r(theta) must be strictly increasing on [0, max_fov/2]")
        object.__setattr__(self, "_r_max", float(r[-1]))

    @staticmethod
    def equidistant(width: int, height: int, fov_deg: float = 120.0) -> "FThetaIntrinsics":
        """Representative equidistant lens: r = f * theta, with the half
        field of view mapped to half the image width."""
        half_fov = math.radians(fov_deg) / 2.0
        f = (width / 2.0) / half_fov
        return FThetaIntrinsics(poly=(0.0, f, 0.0, 0.0, 0.0),
                                cx=(width - 1) / 2.0, cy=(height - 1) / 2.0,
                                width=width, height=height,
                                max_fov=math.radians(fov_deg))

    def radius(self, theta) -> np.ndarray:
        """Forward map theta (radians) -> image radius (pixels)."""
        theta = np.asarray(theta, dtype=np.float64)
        c0, c1, c2, c3, c4 = self.poly
        return (((c4 * theta + c3) * theta + c2) * theta + c1) * theta + c0

    def theta_from_radius(self, r) -> np.ndarray:
        """Invert the forward map by bisection (monotone poly), to 1e-10 rad.

        Radii beyond r(max_fov/2) clamp to the fov edge; callers gate on
        the returned angle or on radius bounds.
        """
        r = np.asarray(r, dtype=np.float64)
        lo = np.zeros_like(r)
        hi = np.full_like(r, self.max_fov / 2.0)
        # 42 halvings of an interval <= pi brings the bracket below 1e-12 rad
        for _ in range(42):
            mid = 0.5 * (lo + hi)
            below = self.radius(mid) < r
            lo = np.where(below, mid, lo)
            hi = np.where(below, hi, mid)
        return 0.5 * (lo + hi)

    def to_dict(self) -> dict:
        return {"poly": list(self.poly), "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height,
                "max_fov_deg": math.degrees(self.max_fov)}

    @staticmethod
    def from_dict(d: dict) -> "FThetaIntrinsics":
        return FThetaIntrinsics(poly=tuple(d["poly"]), cx=d["cx"], cy=d["cy"],
                                width=int(d["width"]), height=int(d["height"]),
                                max_fov=math.radians(d["max_fov_deg"]))


def project_pinhole(point_cam: np.ndarray, intr: PinholeIntrinsics) -> np.ndarray:
    """Project camera-frame points (..., 3) to pixels (..., 2).

    Raises ValueError for any point with z <= 0 (behind camera). The result
    may lie outside the image bounds; callers clip.
    """
    pts = np.asarray(point_cam, dtype=np.float64)
    z = pts[..., 2]
    if np.any(z <= 0):
        raise ValueError("behind camera: point has non-positive z")
    px = intr.fx * pts[..., 0] / z + intr.cx
    py = intr.fy * pts[..., 1] / z + intr.cy
    return np.stack([px, py], axis=-1)


def unproject_pinhole(pixel: np.ndarray, depth, intr: PinholeIntrinsics) -> np.ndarray:
    """Back-project pixels (..., 2) at the given depth(s) to camera frame.

    Raises ValueError for non-positive depth.
    """
    px = np.asarray(pixel, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    x = (px[..., 0] - intr.cx) / intr.fx * d
    y = (px[..., 1] - intr.cy) / intr.fy * d
    z = np.broadcast_to(d, x.shape).astype(np.float64)
    return np.stack([x, y, z], axis=-1)


def project_ftheta(point_cam: np.ndarray, intr: FThetaIntrinsics) -> np.ndarray:
    """Project camera-frame points (..., 3) through the f-theta model.

    The azimuth about the optical axis is preserved; the distance from the
    principal point is poly(theta). Raises OutOfFovError when any ray's
    incidence angle exceeds max_fov / 2.
    """
    pts = np.asarray(point_cam, dtype=np.float64)
    x, y, z = pts[..., 0], pts[..., 1], pts[..., 2]
    rho = np.hypot(x, y)
    theta = np.arctan2(rho, z)
    if np.any(theta > intr.max_fov / 2.0 + 1e-12):
        raise OutOfFovError("ray outside lens field of view")
    r = intr.radius(theta)
    # On-axis rays have undefined azimuth but r == 0, so the ratio is 0/1.
    safe = np.where(rho > 0, rho, 1.0)
    px = intr.cx + r * x / safe
    py = intr.cy + r * y / safe
    return np.stack([px, py], axis=-1)


def rectify(image: np.ndarray, src_model, target: PinholeIntrinsics):
    """Resample an image from a source camera model into an ideal pinhole.

    For each target pixel the pinhole ray is cast, mapped through the
    source model's forward projection, and the source image is bilinearly
    sampled there. Works for FThetaIntrinsics sources (fisheye
    rectification) and PinholeIntrinsics sources (pure re-projection).

    Returns (resampled image, validity mask). Target pixels whose ray falls
    outside the source field of view or image bounds are invalid and zero.
    """
    from .imageops import bilinear_sample

    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] != src_model.height or img.shape[1] != src_model.width:
        raise ValueError("image dimensions do not match the source model")

    xs, ys = np.meshgrid(np.arange(target.width, dtype=np.float64),
                         np.arange(target.height, dtype=np.float64))
    rx = (xs - target.cx) / target.fx
    ry = (ys - target.cy) / target.fy

    if isinstance(src_model, FThetaIntrinsics):
        rho = np.hypot(rx, ry)
        theta = np.arctan(rho)
        valid = theta <= src_model.max_fov / 2.0
        r = src_model.radius(theta)
        safe = np.where(rho > 0, rho, 1.0)
        sx = src_model.cx + r * rx / safe
        sy = src_model.cy + r * ry / safe
    elif isinstance(src_model, PinholeIntrinsics):
        sx = src_model.fx * rx + src_model.cx
        sy = src_model.fy * ry + src_model.cy
        valid = np.ones(sx.shape, dtype=bool)
    else:
        raise TypeError(f"unsupported source model {type(src_model)!r}")

    valid &= (sx >= 0) & (sx <= src_model.width - 1)
    valid &= (sy >= 0) & (sy <= src_model.height - 1)
    out = bilinear_sample(img, np.where(valid, sx, 0.0), np.where(valid, sy, 0.0))
    if out.ndim == 3:
        out[~valid] = 0.0
    else:
        out = np.where(valid, out, 0.0)
    return out, valid
