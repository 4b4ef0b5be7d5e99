"""Pinhole camera model, rigid poses, projection, and pose error metrics.

Conventions used everywhere in this package:
  - world -> camera: p_cam = R @ p_world + T
  - image frame: u right (columns), v down (rows), origin at the top-left
    pixel corner; depth is the camera-frame z of a point
  - rotations are 3x3 orthonormal matrices with det +1
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateProjection, ParseError

ORTHONORMAL_TOL = 1e-9
MIN_DEPTH = 1e-12


def as_vec3(p) -> np.ndarray:
    v = np.asarray(p, dtype=np.float64).reshape(3)
    if not np.all(np.isfinite(v)):
        raise ValueError(f"non-finite 3-vector: {v!r}")
    return v


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    skew: float = 0.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")

    def matrix(self) -> np.ndarray:
        return np.array(
            [
                [self.fx, self.skew, self.cx],
                [0.0, self.fy, self.cy],
                [0.0, 0.0, 1.0],
            ]
        )


@dataclass(frozen=True)
class Pose:
    """Rigid world->camera transform: p_cam = rotation @ p_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = as_vec3(self.translation)
        if not np.all(np.isfinite(r)):
            raise ValueError("non-finite rotation matrix")
        if np.max(np.abs(r.T @ r - np.eye(3))) > ORTHONORMAL_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > ORTHONORMAL_TOL:
            raise ValueError("rotation determinant is not +1")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform world points ((3,) or (n,3)) into the camera frame."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def compose(self, other: "Pose") -> "Pose":
        """Pose mapping p -> self(other(p))."""
        return Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass(frozen=True)
class Projection:
    u: float
    v: float
    depth: float


@dataclass(frozen=True)
class CameraView:
    """Per-image camera: intrinsics plus an extrinsic world->camera pose."""

    image_id: int
    intrinsics: Intrinsics
    pose: Pose
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        k = self.intrinsics
        if not (0.0 <= k.cx <= self.width and 0.0 <= k.cy <= self.height):
            raise ValueError("principal point outside the sensor rectangle")


def project(point, pose: Pose, k: Intrinsics) -> Projection:
    """Project a world point through the pinhole model. No frustum check."""
    p_cam = pose.rotation @ as_vec3(point) + pose.translation
    depth = float(p_cam[2])
    if abs(depth) < MIN_DEPTH:
        raise DegenerateProjection(f"point on principal plane, depth={depth}")
    u = (k.fx * p_cam[0] + k.skew * p_cam[1]) / depth + k.cx
    v = k.fy * p_cam[1] / depth + k.cy
    return Projection(float(u), float(v), depth)


def unproject(proj: Projection, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Inverse of project: recover the world point from (u, v, depth)."""
    y = (proj.v - k.cy) / k.fy
    x = (proj.u - k.cx - k.skew * y) / k.fx
    p_cam = proj.depth * np.array([x, y, 1.0])
    return pose.rotation.T @ (p_cam - pose.translation)


def project_points(points: np.ndarray, pose: Pose, k: Intrinsics):
    """Vectorized projection of (n,3) world points.

    Returns (u, v, depth) float arrays; rows with near-zero depth come back
    as NaN pixel coordinates rather than raising.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    p_cam = pts @ pose.rotation.T + pose.translation
    depth = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(np.abs(depth) < MIN_DEPTH, np.nan, depth)
        u = (k.fx * p_cam[:, 0] + k.skew * p_cam[:, 1]) / safe + k.cx
        v = k.fy * p_cam[:, 1] / safe + k.cy
    return u, v, depth


def in_frustum(proj: Projection, img_w: int, img_h: int) -> bool:
    """Strict-inequality frustum test: 0 < u < w, 0 < v < h, depth > 0."""
    if img_w <= 0 or img_h <= 0:
        raise ValueError("image dimensions must be positive")
    return 0.0 < proj.u < img_w and 0.0 < proj.v < img_h and proj.depth > 0.0


def in_frustum_mask(u, v, depth, img_w: int, img_h: int) -> np.ndarray:
    """Vectorized strict frustum test; NaN coordinates fail."""
    with np.errstate(invalid="ignore"):
        return (u > 0.0) & (u < img_w) & (v > 0.0) & (v < img_h) & (depth > 0.0)


def position_error(gt, est) -> float:
    """Euclidean distance between two positions (scene units)."""
    return float(np.linalg.norm(as_vec3(gt) - as_vec3(est)))


def rotation_error_deg(gt: Pose, est: Pose) -> float:
    """Angle in degrees between two rotations.

    arccos((trace(R_g R_e^T) - 1) / 2) converted to degrees, with the
    argument clamped to [-1, 1] to absorb floating-point drift. Evaluated
    in extended precision through the equivalent arcsin forms: arccos loses
    ~8 digits near +-1, which would put a ~1e-6 degree floor on measuring
    near-zero errors.
    """
    ld = np.longdouble
    pi_l = np.arccos(ld(-1.0))
    # project the stored matrices onto exact rotations first: their rounding
    # perturbs the trace linearly but the angle only quadratically, which
    # would otherwise floor the measurement at ~sqrt(eps) radians
    rg = _orthonormal_rows_ld(gt.rotation.astype(ld))
    re = _orthonormal_rows_ld(est.rotation.astype(ld))
    prod = rg @ re.T
    arg = (np.trace(prod) - 1.0) / 2.0
    arg = min(ld(1.0), max(ld(-1.0), arg))
    if arg >= 0:
        angle = 2.0 * np.arcsin(np.sqrt((1.0 - arg) / 2.0))
    else:
        angle = pi_l - 2.0 * np.arcsin(np.sqrt((1.0 + arg) / 2.0))
    return float(angle * ld(180.0) / pi_l)


def _orthonormal_rows_ld(r: np.ndarray) -> np.ndarray:
    """Modified Gram-Schmidt on rows in extended precision."""
    out = r.copy()
    for i in range(3):
        for j in range(i):
            out[i] = out[i] - (out[i] @ out[j]) * out[j]
        out[i] = out[i] / np.sqrt(out[i] @ out[i])
    return out


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World->camera pose for a camera at `eye` whose optical axis points
    at `target`, with world `up` appearing upward in the image."""
    eye = as_vec3(eye)
    forward = as_vec3(target) - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise ValueError("eye and target coincide")
    z = forward / norm
    up = as_vec3(up)
    x = np.cross(z, up)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        # looking straight along `up`: pick an arbitrary horizontal right axis
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        xn = np.linalg.norm(x)
    x = x / xn
    y = np.cross(z, x)
    r = np.stack([x, y, z])
    return Pose(r, -r @ eye)


# ---------------------------------------------------------------------------
# Pose file format: one JSON array of records per dataset. Each record is
# {image_id, rotation: 9 reals row-major, translation: 3 reals,
#  fx, fy, cx, cy, skew, width, height}, convention p_cam = R p_world + T.
# ---------------------------------------------------------------------------


def view_to_record(view: CameraView) -> dict:
    k = view.intrinsics
    return {
        "image_id": view.image_id,
        "rotation": [float(x) for x in view.pose.rotation.reshape(9)],
        "translation": [float(x) for x in view.pose.translation],
        "fx": k.fx,
        "fy": k.fy,
        "cx": k.cx,
        "cy": k.cy,
        "skew": k.skew,
        "width": view.width,
        "height": view.height,
    }


def view_from_record(rec: dict) -> CameraView:
    try:
        pose = Pose(
            np.array(rec["rotation"], dtype=np.float64).reshape(3, 3),
            np.array(rec["translation"], dtype=np.float64),
        )
        k = Intrinsics(
            fx=float(rec["fx"]),
            fy=float(rec["fy"]),
            cx=float(rec["cx"]),
            cy=float(rec["cy"]),
            skew=float(rec.get("skew", 0.0)),
        )
        return CameraView(
            image_id=int(rec["image_id"]),
            intrinsics=k,
            pose=pose,
            width=int(rec["width"]),
            height=int(rec["height"]),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"bad pose record: {exc}") from exc


def save_poses(views, path) -> None:
    records = [view_to_record(v) for v in views]
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(records, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_poses(path) -> list[CameraView]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            records = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"bad pose file {path}: {exc}") from exc
    if not isinstance(records, list):
        raise ParseError(f"pose file {path} is not a JSON array")
    return [view_from_record(r) for r in records]
