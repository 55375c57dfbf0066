"""Rigid poses, camera intrinsics, and image-space pose deltas.

Conventions used across the package:

- Rotations are unit quaternions in (w, x, y, z) order, canonicalized so the
  first nonzero component is non-negative. All math is float64.
- A Pose maps model-frame points into the camera frame: p_cam = R @ p + t.
- The camera looks down +z; poses in front of the camera have t[2] > 0.
- Euler angles at the API boundary are intrinsic X-Y-Z, in degrees.
- The image-space delta between two poses of the same object holds a rotation
  expressed in camera-parallel axes pivoting at the object center, plus a
  translation encoded as pixel offsets of the projected center (vx, vy) and a
  log depth ratio vz = log(z_src / z_tgt). Applying a delta therefore never
  entangles rotation with translation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class NonPositiveDepth(ValueError):
    """A point or object center sits at or behind the camera plane."""


def _canonical_quat(q: np.ndarray) -> np.ndarray:
    """Normalize and sign-fix a quaternion (first nonzero component >= 0)."""
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or n < 1e-12:
        raise ValueError("quaternion norm too small to normalize")
    q = q / n
    for c in q:
        if c != 0.0:
            if c < 0.0:
                q = -q
            break
    return q


class Rotation:
    """Unit quaternion rotation, storage order (w, x, y, z)."""

    __slots__ = ("q",)

    def __init__(self, q) -> None:
        self.q = _canonical_quat(q)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls((1.0, 0.0, 0.0, 0.0))

    @classmethod
    def from_axis_angle(cls, axis, angle_rad: float) -> "Rotation":
        axis = np.asarray(axis, dtype=np.float64).reshape(3)
        n = float(np.linalg.norm(axis))
        if n < 1e-12:
            if abs(angle_rad) < 1e-12:
                return cls.identity()
            raise ValueError("rotation axis must be nonzero")
        half = 0.5 * float(angle_rad)
        return cls(np.concatenate(([np.cos(half)], np.sin(half) * axis / n)))

    @classmethod
    def from_rotvec(cls, vec) -> "Rotation":
        """Axis-angle vector (axis * angle in radians)."""
        vec = np.asarray(vec, dtype=np.float64).reshape(3)
        angle = float(np.linalg.norm(vec))
        if angle < 1e-12:
            return cls.identity()
        return cls.from_axis_angle(vec / angle, angle)

    @classmethod
    def from_euler_deg(cls, rx: float, ry: float, rz: float) -> "Rotation":
        """Intrinsic X-Y-Z rotation from degrees: R = Rx @ Ry @ Rz."""
        x = cls.from_axis_angle((1.0, 0.0, 0.0), np.deg2rad(rx))
        y = cls.from_axis_angle((0.0, 1.0, 0.0), np.deg2rad(ry))
        z = cls.from_axis_angle((0.0, 0.0, 1.0), np.deg2rad(rz))
        return x @ y @ z

    @classmethod
    def from_matrix(cls, m) -> "Rotation":
        """Shepperd's method; m must be a proper rotation matrix."""
        m = np.asarray(m, dtype=np.float64).reshape(3, 3)
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0.0:
            s = np.sqrt(tr + 1.0) * 2.0
            q = (0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
                 (m[1, 0] - m[0, 1]) / s)
        elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            q = ((m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s,
                 (m[0, 2] + m[2, 0]) / s)
        elif m[1, 1] >= m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            q = ((m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s,
                 (m[1, 2] + m[2, 1]) / s)
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            q = ((m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s,
                 (m[1, 2] + m[2, 1]) / s, 0.25 * s)
        return cls(q)

    @classmethod
    def random(cls, rng: np.random.Generator) -> "Rotation":
        """Uniform random rotation (normalized 4D Gaussian)."""
        while True:
            q = rng.normal(size=4)
            if np.linalg.norm(q) > 1e-6:
                return cls(q)

    def as_matrix(self) -> np.ndarray:
        w, x, y, z = self.q
        return np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ], dtype=np.float64)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.as_matrix().T

    def __matmul__(self, other: "Rotation") -> "Rotation":
        """Compose: (a @ b).apply(p) == a.apply(b.apply(p))."""
        w1, x1, y1, z1 = self.q
        w2, x2, y2, z2 = other.q
        return Rotation((
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ))

    def inverse(self) -> "Rotation":
        w, x, y, z = self.q
        return Rotation((w, -x, -y, -z))

    def angle(self) -> float:
        """Rotation magnitude in radians, in [0, pi]."""
        w, x, y, z = self.q
        # atan2 form: well conditioned near 0 and pi, unlike arccos(|w|)
        return 2.0 * float(np.arctan2(np.linalg.norm((x, y, z)), abs(w)))

    def as_rotvec(self) -> np.ndarray:
        w, x, y, z = self.q
        s = float(np.linalg.norm((x, y, z)))
        if s < 1e-12:
            return np.zeros(3)
        angle = 2.0 * float(np.arctan2(s, w))
        return np.array((x, y, z)) * (angle / s)

    def scaled(self, factor: float) -> "Rotation":
        """Rotation about the same axis with the angle scaled by factor."""
        return Rotation.from_rotvec(self.as_rotvec() * float(factor))

    def __repr__(self) -> str:
        return "Rotation(q=[%.6f, %.6f, %.6f, %.6f])" % tuple(self.q)


def angular_distance(a: Rotation, b: Rotation) -> float:
    """Geodesic distance on SO(3) in radians, in [0, pi]; sign-insensitive.

    Uses the chord/atan2 form, which keeps full precision near 0 where the
    arccos of the quaternion dot product loses ~8 digits.
    """
    diff = float(np.linalg.norm(a.q - b.q))
    summ = float(np.linalg.norm(a.q + b.q))
    lo, hi = (diff, summ) if diff <= summ else (summ, diff)
    return 4.0 * float(np.arctan2(lo, hi))


class Pose:
    """Rigid transform from model frame to camera frame: p_cam = R @ p + t."""

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation: Rotation, translation) -> None:
        self.rotation = rotation
        self.translation = np.asarray(translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(Rotation.identity(), np.zeros(3))

    def transform(self, points) -> np.ndarray:
        return self.rotation.apply(points) + self.translation

    def to_json(self) -> str:
        return json.dumps({"q": [float(c) for c in self.rotation.q],
                           "t": [float(c) for c in self.translation]})

    @classmethod
    def from_json(cls, text: str) -> "Pose":
        obj = json.loads(text)
        return cls(Rotation(obj["q"]), obj["t"])

    def __repr__(self) -> str:
        return "Pose(q=%s, t=[%.6f, %.6f, %.6f])" % (
            np.array_str(self.q_array(), precision=6), *self.translation)

    def q_array(self) -> np.ndarray:
        return self.rotation.q


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole camera: pixel (u, v) = (fx * x / z + cx, fy * y / z + cy)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def as_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]], dtype=np.float64)

    @property
    def aspect(self) -> float:
        """Image aspect ratio width / height."""
        return self.width / self.height

    def to_json(self) -> str:
        return json.dumps({"fx": self.fx, "fy": self.fy, "cx": self.cx,
                           "cy": self.cy, "width": self.width,
                           "height": self.height})

    @classmethod
    def from_json(cls, text: str) -> "CameraIntrinsics":
        obj = json.loads(text)
        return cls(fx=float(obj["fx"]), fy=float(obj["fy"]),
                   cx=float(obj["cx"]), cy=float(obj["cy"]),
                   width=int(obj["width"]), height=int(obj["height"]))


def project(points, pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Project model-frame points to continuous pixel coordinates (N, 2).

    Raises NonPositiveDepth if any transformed point has z <= 0.
    """
    cam = pose.transform(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    z = cam[:, 2]
    if np.any(z <= 0.0):
        raise NonPositiveDepth("points at or behind the camera")
    out = np.empty((cam.shape[0], 2))
    out[:, 0] = intr.fx * cam[:, 0] / z + intr.cx
    out[:, 1] = intr.fy * cam[:, 1] / z + intr.cy
    return out


def project_center(pose: Pose, intr: CameraIntrinsics) -> np.ndarray:
    """Pixel coordinates of the projected object center (model origin)."""
    return project(np.zeros((1, 3)), pose, intr)[0]


class UntangledDelta:
    """Image-space pose delta.

    rotation: camera-parallel-axes rotation pivoting at the object center.
    v = (vx, vy, vz): projected-center pixel offsets and log depth ratio
    log(z_src / z_tgt).
    """

    __slots__ = ("rotation", "v")

    def __init__(self, rotation: Rotation, v) -> None:
        self.rotation = rotation
        self.v = np.asarray(v, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "UntangledDelta":
        return cls(Rotation.identity(), np.zeros(3))

    @property
    def vx(self) -> float:
        return float(self.v[0])

    @property
    def vy(self) -> float:
        return float(self.v[1])

    @property
    def vz(self) -> float:
        return float(self.v[2])

    def scaled(self, factor: float) -> "UntangledDelta":
        return UntangledDelta(self.rotation.scaled(factor), self.v * factor)

    def to_json(self) -> str:
        return json.dumps({"q": [float(c) for c in self.rotation.q],
                           "v": [float(c) for c in self.v]})

    @classmethod
    def from_json(cls, text: str) -> "UntangledDelta":
        obj = json.loads(text)
        return cls(Rotation(obj["q"]), obj["v"])

    def __repr__(self) -> str:
        return "UntangledDelta(q=%s, v=[%.4f, %.4f, %.4f])" % (
            np.array_str(self.rotation.q, precision=6), *self.v)


def _require_positive_z(pose: Pose, who: str) -> None:
    if pose.translation[2] <= 0.0:
        raise NonPositiveDepth(f"{who} pose center depth must be positive")


def compute_untangled(src: Pose, tgt: Pose,
                      intr: CameraIntrinsics) -> UntangledDelta:
    """Delta that moves src onto tgt; inverse of apply_untangled."""
    _require_positive_z(src, "source")
    _require_positive_z(tgt, "target")
    xs, ys, zs = src.translation
    xt, yt, zt = tgt.translation
    v = np.array([
        intr.fx * (xt / zt - xs / zs),
        intr.fy * (yt / zt - ys / zs),
        np.log(zs / zt),
    ])
    return UntangledDelta(tgt.rotation @ src.rotation.inverse(), v)


def apply_untangled(delta: UntangledDelta, src: Pose,
                    intr: CameraIntrinsics) -> Pose:
    """Apply an image-space delta: rotation about the object center in
    camera-parallel axes, translation decoded from pixel offsets and the log
    depth ratio."""
    _require_positive_z(src, "source")
    xs, ys, zs = src.translation
    zt = zs / np.exp(delta.vz)
    xt = (delta.vx / intr.fx + xs / zs) * zt
    yt = (delta.vy / intr.fy + ys / zs) * zt
    return Pose(delta.rotation @ src.rotation, (xt, yt, zt))


def compute_camera_frame(src: Pose, tgt: Pose) -> tuple[Rotation, np.ndarray]:
    """Entangled camera-frame delta (R_d, t_d): tgt = (R_d @ R_src,
    R_d @ t_src + t_d)."""
    rot = tgt.rotation @ src.rotation.inverse()
    t_d = tgt.translation - rot.apply(src.translation)
    return rot, t_d


def apply_camera_frame(rotation: Rotation, t_delta, src: Pose) -> Pose:
    """Apply a camera-frame delta: the rotation pivots at the camera origin,
    so it drags the object center by (R_d - I) @ t_src before t_delta acts."""
    t_delta = np.asarray(t_delta, dtype=np.float64).reshape(3)
    return Pose(rotation @ src.rotation,
                rotation.apply(src.translation) + t_delta)


def apply_model_frame(rotation: Rotation, v, src: Pose,
                      intr: CameraIntrinsics) -> Pose:
    """Apply a delta whose rotation is expressed in model axes (composed on
    the right); translation decoded exactly as in apply_untangled."""
    moved = apply_untangled(UntangledDelta(Rotation.identity(), v), src, intr)
    return Pose(src.rotation @ rotation, moved.translation)
