"""Rigid transforms, se(3) exponential/log maps and the pinhole camera.

All geometry is float64. Image and voxel payloads elsewhere are float32 or
uint8; only the transforms and camera math live here.

Pixel convention: integer pixel (u, v) samples at exactly (u, v), with no
half-pixel offset. Projection, back-projection and the synthetic renderer
all share it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SMALL_ANGLE = 1e-6


class InvalidDepth(ValueError):
    """Raised when a pixel's depth cannot be back-projected."""


class BehindCamera(ValueError):
    """Raised when projecting a point with non-positive z."""


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    depth_scale: float = 5000.0

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.depth_scale <= 0:
            raise ValueError("depth_scale must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> "CameraIntrinsics":
        """Intrinsics of an image decimated by an integer factor.

        Coarse pixel u covers fine pixels [u*f, u*f + f) and sits at their
        centre, (u*f + (f-1)/2).
        """
        off = (factor - 1) / 2.0
        return CameraIntrinsics(
            fx=self.fx / factor,
            fy=self.fy / factor,
            cx=(self.cx - off) / factor,
            cy=(self.cy - off) / factor,
            width=self.width // factor,
            height=self.height // factor,
            depth_scale=self.depth_scale,
        )

    def as_array(self) -> np.ndarray:
        """(fx, fy, cx, cy, width, height) packed for the kernels."""
        return np.array([self.fx, self.fy, self.cx, self.cy, self.width, self.height], dtype=np.float64)


def hat(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    return np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])


def vee(m: np.ndarray) -> np.ndarray:
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


@dataclass(frozen=True)
class Twist:
    """Minimal se(3) increment: translational part v, rotational part w."""

    v: np.ndarray = field(default_factory=lambda: np.zeros(3))
    w: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        v = np.asarray(self.v, dtype=np.float64).reshape(3)
        w = np.asarray(self.w, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(w))):
            raise ValueError("twist components must be finite")
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "w", w)

    @classmethod
    def from_vector(cls, xi) -> "Twist":
        xi = np.asarray(xi, dtype=np.float64).reshape(6)
        return cls(xi[:3], xi[3:])

    def vector(self) -> np.ndarray:
        return np.concatenate([self.v, self.w])

    def matrix(self) -> np.ndarray:
        """The 4x4 element of se(3)."""
        m = np.zeros((4, 4))
        m[:3, :3] = hat(self.w)
        m[:3, 3] = self.v
        return m


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Pose":
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def is_valid(self, tol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=tol, rtol=0)
            and abs(np.linalg.det(r) - 1.0) <= tol
            and np.all(np.isfinite(self.translation))
        )

    def apply(self, points) -> np.ndarray:
        """Transform (..., 3) points."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)

    def inverse(self) -> "Pose":
        return invert(self)


def compose(a: Pose, b: Pose) -> Pose:
    """a * b, i.e. apply b first."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def invert(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def so3_exp(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        # second-order Taylor; the remainder is O(theta^3)
        return np.eye(3) + W + 0.5 * W @ W
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * W + b * W @ W


def _left_jacobian(w) -> np.ndarray:
    theta = float(np.linalg.norm(w))
    W = hat(w)
    if theta < SMALL_ANGLE:
        return np.eye(3) + 0.5 * W + W @ W / 6.0
    b = (1.0 - np.cos(theta)) / theta**2
    c = (theta - np.sin(theta)) / theta**3
    return np.eye(3) + b * W + c * W @ W


def exp_map(xi) -> Pose:
    """Exponential of a twist (Rodrigues rotation, V-matrix translation)."""
    if not isinstance(xi, Twist):
        xi = Twist.from_vector(xi)
    return Pose(so3_exp(xi.w), _left_jacobian(xi.w) @ xi.v)


def so3_log(R: np.ndarray) -> np.ndarray:
    cos_theta = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = float(np.arccos(cos_theta))
    if theta < SMALL_ANGLE:
        return vee(R - R.T) / 2.0
    if np.pi - theta < 1e-6:
        # near pi: recover the axis from the symmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / np.sqrt(max(B[k, k], 1e-300))
        axis /= np.linalg.norm(axis)
        return axis * theta
    return vee(R - R.T) * theta / (2.0 * np.sin(theta))


def log_map(T: Pose) -> Twist:
    w = so3_log(T.rotation)
    v = np.linalg.solve(_left_jacobian(w), T.translation)
    return Twist(v, w)


def interpolate(a: Pose, b: Pose, s: float) -> Pose:
    """Geodesic blend a -> b (piecewise-linear in se(3))."""
    rel = log_map(invert(a) @ b)
    return a @ exp_map(rel.vector() * s)


def rotation_angle(R: np.ndarray) -> float:
    return float(np.arccos(np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)))


def quaternion_to_rotation(q) -> np.ndarray:
    """(qx, qy, qz, qw) -> 3x3, normalising first."""
    x, y, z, w = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rotation_to_quaternion(R: np.ndarray) -> np.ndarray:
    """3x3 -> (qx, qy, qz, qw) with qw >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, 0.25 * s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s, (R[2, 1] - R[1, 2]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s, (R[0, 2] - R[2, 0]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s, (R[1, 0] - R[0, 1]) / s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[3] < 0 else q


def look_at(eye, target, up=(0.0, -1.0, 0.0)) -> Pose:
    """Camera-to-world pose for a camera at `eye` looking at `target`.

    Camera axes follow the usual optical frame: +z forward, +x right,
    +y down.
    """
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def backproject(p, depth, k: CameraIntrinsics) -> np.ndarray:
    """Pixel (u, v) at metric depth -> camera-frame 3D point."""
    depth = float(depth)
    if not np.isfinite(depth) or depth <= 0:
        raise InvalidDepth(f"cannot back-project depth {depth!r}")
    u, v = p
    return np.array([(u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth])


def project(x, k: CameraIntrinsics) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not x[2] > 0:
        raise BehindCamera(f"point has z={x[2]!r}")
    return np.array([k.fx * x[0] / x[2] + k.cx, k.fy * x[1] / x[2] + k.cy])


def backproject_image(depth: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """(H, W) depth -> (H, W, 3) points; invalid pixels give z <= 0."""
    h, w = depth.shape
    u = np.arange(w, dtype=np.float64)[None, :]
    v = np.arange(h, dtype=np.float64)[:, None]
    z = depth.astype(np.float64)
    return np.stack(np.broadcast_arrays((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z), axis=-1)


def pixel_rays(k: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) ray directions scaled so that z == 1."""
    return backproject_image(np.ones((k.height, k.width)), k)
