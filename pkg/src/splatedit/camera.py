"""Pinhole cameras, projection and two-view epipolar geometry.

Conventions: rotation/translation map world to camera (x right, y down,
z forward, as in COLMAP/OpenCV). Pixel ``(u, v)`` addresses column ``u`` and
row ``v`` with integer coordinates at pixel centers.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BehindCameraError, DegenerateGeometryError, InputError

MIN_DEPTH = 1e-9
ORTHO_TOL = 1e-9


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a (w, x, y, z) quaternion; the input is normalized first."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quats_to_rotmats(q: np.ndarray) -> np.ndarray:
    """Batched :func:`quat_to_rotmat` for an (N, 4) array."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q.T
    out = np.empty((len(q), 3, 3))
    out[:, 0, 0] = 1 - 2 * (y * y + z * z)
    out[:, 0, 1] = 2 * (x * y - w * z)
    out[:, 0, 2] = 2 * (x * z + w * y)
    out[:, 1, 0] = 2 * (x * y + w * z)
    out[:, 1, 1] = 1 - 2 * (x * x + z * z)
    out[:, 1, 2] = 2 * (y * z - w * x)
    out[:, 2, 0] = 2 * (x * z - w * y)
    out[:, 2, 1] = 2 * (y * z + w * x)
    out[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return out


def rotmat_to_quat(R) -> np.ndarray:
    """(w, x, y, z) quaternion with w >= 0 for a proper rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return q if q[0] >= 0 else -q


def quat_multiply(a, b) -> np.ndarray:
    """Hamilton product ``a * b``; ``b`` may be an (N, 4) batch."""
    aw, ax, ay, az = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


@dataclass(frozen=True, eq=False)
class CameraView:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    id: str = ""

    def __post_init__(self):
        R = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise InputError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        if np.max(np.abs(R.T @ R - np.eye(3))) > ORTHO_TOL:
            raise InputError("rotation is not orthonormal")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Optical center in world coordinates, ``-R^T t``."""
        return -self.rotation.T @ self.translation

    @property
    def viewing_direction(self) -> np.ndarray:
        """Unit optical axis in world coordinates."""
        return self.rotation[2].copy()

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass(frozen=True)
class EpipolarLine:
    """Line ``a*u + b*v + c = 0`` in pixel coordinates with ``a^2 + b^2 = 1``."""

    a: float
    b: float
    c: float

    @property
    def coeffs(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])

    def distance(self, pixels) -> np.ndarray:
        p = np.asarray(pixels, dtype=np.float64)
        return np.abs(p[..., 0] * self.a + p[..., 1] * self.b + self.c)

    def normalized(self) -> "EpipolarLine":
        return _normalize_line(self.coeffs)


def _normalize_line(l) -> EpipolarLine:
    n = float(np.hypot(l[0], l[1]))
    if not n > 0 or not np.isfinite(n):
        raise DegenerateGeometryError("epipolar line vector has zero direction (pixel is the epipole)")
    return EpipolarLine(float(l[0] / n), float(l[1] / n), float(l[2] / n))


def project_points(camera: CameraView, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (N, 2) pixels and (N,) depths without depth checks."""
    pc = camera.to_camera(np.atleast_2d(points))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * pc[:, 0] / z + camera.cx
        v = camera.fy * pc[:, 1] / z + camera.cy
    return np.stack([u, v], axis=1), z


def project(camera: CameraView, point) -> tuple[np.ndarray, float]:
    """Project one world point to ``(pixel, depth)``.

    Raises:
        BehindCameraError: camera-frame depth is at most 1e-9.
    """
    x, y, z = camera.to_camera(point)
    if z <= MIN_DEPTH:
        raise BehindCameraError(f"point has camera depth {z:.3g}")
    return np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy]), float(z)


def unproject(camera: CameraView, pixel, depth: float) -> np.ndarray:
    u, v = pixel
    pc = np.array([(u - camera.cx) / camera.fx * depth, (v - camera.cy) / camera.fy * depth, depth])
    return camera.rotation.T @ (pc - camera.translation)


def camera_distance(a: CameraView, b: CameraView) -> float:
    """Euclidean distance between optical centers."""
    return float(np.linalg.norm(a.center - b.center))


def fundamental_matrix(a: CameraView, b: CameraView) -> np.ndarray:
    """F with ``x_b^T F x_a = 0`` for homogeneous pixels of one 3D point.

    Raises:
        DegenerateGeometryError: the two optical centers coincide.
    """
    if camera_distance(a, b) <= MIN_DEPTH:
        raise DegenerateGeometryError("camera centers coincide; epipolar geometry undefined")
    R = b.rotation @ a.rotation.T
    t = b.translation - R @ a.translation
    E = skew(t) @ R
    return np.linalg.inv(b.K).T @ E @ np.linalg.inv(a.K)


def epipolar_line(F, pixel) -> EpipolarLine:
    """Normalized epipolar line ``F @ (u, v, 1)`` in the second view."""
    F = np.asarray(F, dtype=np.float64)
    return _normalize_line(F @ np.array([pixel[0], pixel[1], 1.0]))


def infinite_homography(a: CameraView, b: CameraView) -> np.ndarray:
    """Pixel map between two views sharing an optical center."""
    return b.K @ b.rotation @ a.rotation.T @ np.linalg.inv(a.K)


def look_at(eye, target, up=(0.0, 0.0, 1.0), *, width: int, height: int, fov_deg: float = 50.0,
            id: str = "") -> CameraView:
    """Camera at ``eye`` looking at ``target`` with a horizontal field of view ``fov_deg``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-12:
        raise DegenerateGeometryError("viewing direction is parallel to the up vector")
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return CameraView(f, f, (width - 1) / 2, (height - 1) / 2, width, height, R, -R @ eye, id)


def orbit_cameras(n: int = 16, *, radius: float = 4.0, elevation: float = 1.5, target=(0.0, 0.0, 0.0),
                  width: int = 64, height: int = 64, fov_deg: float = 50.0) -> list[CameraView]:
    """``n`` cameras evenly spaced on a horizontal circle around ``target`` (z up)."""
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for i in range(n):
        ang = 2 * np.pi * i / n
        eye = target + np.array([radius * np.cos(ang), radius * np.sin(ang), elevation])
        cams.append(look_at(eye, target, width=width, height=height, fov_deg=fov_deg, id=f"view_{i:03d}"))
    return cams


def camera_to_dict(cam: CameraView) -> dict:
    qw, qx, qy, qz = rotmat_to_quat(cam.rotation)
    tx, ty, tz = cam.translation
    return {"id": cam.id, "width": int(cam.width), "height": int(cam.height),
            "fx": float(cam.fx), "fy": float(cam.fy), "cx": float(cam.cx), "cy": float(cam.cy),
            "qw": float(qw), "qx": float(qx), "qy": float(qy), "qz": float(qz),
            "tx": float(tx), "ty": float(ty), "tz": float(tz)}


def camera_from_dict(d: dict) -> CameraView:
    try:
        R = quat_to_rotmat([d["qw"], d["qx"], d["qy"], d["qz"]])
        return CameraView(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                          int(d["width"]), int(d["height"]), R,
                          [float(d["tx"]), float(d["ty"]), float(d["tz"])], str(d.get("id", "")))
    except KeyError as exc:
        raise InputError(f"camera entry missing field {exc.args[0]!r}") from None


def load_cameras(path) -> list[CameraView]:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise InputError(f"{path}: expected a JSON array of cameras")
    cams = [camera_from_dict(e) for e in entries]
    for i, c in enumerate(cams):
        if not c.id:
            cams[i] = CameraView(c.fx, c.fy, c.cx, c.cy, c.width, c.height, c.rotation, c.translation,
                                 f"view_{i:03d}")
    return cams


def save_cameras(cameras, path) -> None:
    Path(path).write_text(json.dumps([camera_to_dict(c) for c in cameras], indent=2) + "\n")
