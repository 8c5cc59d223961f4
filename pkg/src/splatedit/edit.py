"""Coarse-guidance construction: oriented boxes, foreground pruning, asset fitting.

Box axes are stored as matrix columns ``(right, forward, up)`` with
``right = forward x up`` so that every box is right-handed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .camera import CameraView, project_points, quat_multiply, rotmat_to_quat
from .errors import DegenerateGeometryError, InputError, NothingToReplaceError
from .splats import SplatScene, merge

TRIM_PERCENT = 1.0  # keep the central 98% along each axis
GROUND_FALLBACK_FRACTION = 0.05
_REL_EIG_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class OrientedBBox:
    center: np.ndarray
    axes: np.ndarray  # columns: right, forward, up
    half_extents: np.ndarray

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(3)
        A = np.array(self.axes, dtype=np.float64).reshape(3, 3)
        h = np.array(self.half_extents, dtype=np.float64).reshape(3)
        for arr in (c, A, h):
            arr.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "axes", A)
        object.__setattr__(self, "half_extents", h)
        if np.max(np.abs(A.T @ A - np.eye(3))) > 1e-9 or abs(np.linalg.det(A) - 1.0) > 1e-9:
            raise InputError("bbox axes must be a proper rotation (orthonormal, det +1)")
        if not np.all(h > 0):
            raise InputError(f"bbox half extents must be positive, got {h}")

    @property
    def right(self) -> np.ndarray:
        return self.axes[:, 0]

    @property
    def forward(self) -> np.ndarray:
        return self.axes[:, 1]

    @property
    def up(self) -> np.ndarray:
        return self.axes[:, 2]

    def to_local(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) @ self.axes

    def contains(self, points, slack: float = 0.0) -> np.ndarray:
        """Per point: inside the box grown by ``slack`` times each half extent."""
        local = np.abs(self.to_local(np.atleast_2d(points)))
        return np.all(local <= self.half_extents * (1.0 + slack), axis=1)

    def to_dict(self) -> dict:
        return {"center": self.center.tolist(), "axes": self.axes.reshape(-1).tolist(),
                "half_extents": self.half_extents.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "OrientedBBox":
        try:
            return cls(d["center"], np.reshape(d["axes"], (3, 3)), d["half_extents"])
        except KeyError as exc:
            raise InputError(f"bbox is missing {exc.args[0]!r}") from None


def _covariance(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = points.mean(axis=0)
    d = points - mean
    return mean, d.T @ d / len(points)


def _percentile_box(points: np.ndarray, axes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    proj = points @ axes
    lo = np.percentile(proj, TRIM_PERCENT, axis=0)
    hi = np.percentile(proj, 100.0 - TRIM_PERCENT, axis=0)
    half = (hi - lo) / 2.0
    half = np.maximum(half, 1e-9 * max(float(half.max()), 1e-12))
    return axes @ ((lo + hi) / 2.0), half


def _forward_in_plane(points: np.ndarray, up: np.ndarray) -> np.ndarray:
    """Largest-variance direction of ``points`` inside the plane orthogonal to ``up``."""
    P = np.eye(3) - np.outer(up, up)
    full = points - points.mean(axis=0)
    centered = full @ P
    cov = centered.T @ centered / len(points)
    vals, vecs = np.linalg.eigh(cov)
    if vals[2] <= _REL_EIG_TOL * np.sum(full * full) / len(points):
        raise DegenerateGeometryError("object has no extent orthogonal to the up axis")
    fwd = vecs[:, 2]
    fwd = fwd - up * (fwd @ up)
    fwd /= np.linalg.norm(fwd)
    # Eigenvector sign is arbitrary; pin it to the skew of the data so the
    # choice moves with the points under rigid motion.
    if np.sum((centered @ fwd) ** 3) < 0:
        fwd = -fwd
    return fwd


def _box_with_up(points: np.ndarray, up: np.ndarray) -> OrientedBBox:
    fwd = _forward_in_plane(points, up)
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    axes = np.stack([right, fwd, up], axis=1)
    center, half = _percentile_box(points, axes)
    return OrientedBBox(center, axes, half)


def _as_points(pts, name: str, minimum: int) -> np.ndarray:
    arr = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(arr) < minimum:
        raise InputError(f"{name}: need at least {minimum} points, got {len(arr)}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name}: non-finite coordinates")
    return arr


def pca_bbox(object_points, ground_points) -> OrientedBBox:
    """Upright oriented box around an object resting on a ground surface.

    ``up`` is the smallest-variance principal axis of the ground points,
    signed toward the object. ``forward`` is the largest-variance axis of the
    object inside the plane orthogonal to ``up``, and ``right = forward x up``.
    Extents span the 1st to 99th percentile of the object along each axis.

    Raises:
        InputError: fewer than 4 object or 3 ground points.
        DegenerateGeometryError: the object is (nearly) a line or a point, or
            the ground points are collinear.
    """
    obj = _as_points(object_points, "object_points", 4)
    ground = _as_points(ground_points, "ground_points", 3)

    obj_mean, obj_cov = _covariance(obj)
    ev = np.linalg.eigvalsh(obj_cov)
    if ev[1] <= _REL_EIG_TOL * max(ev[2], 1e-300):
        raise DegenerateGeometryError("object point cloud is degenerate (two near-zero principal variances)")

    g_mean, g_cov = _covariance(ground)
    gvals, gvecs = np.linalg.eigh(g_cov)
    if gvals[1] <= _REL_EIG_TOL * max(gvals[2], 1e-300):
        raise DegenerateGeometryError("ground points are collinear")
    up = gvecs[:, 0] / np.linalg.norm(gvecs[:, 0])
    if up @ (obj_mean - g_mean) < 0:
        up = -up
    return _box_with_up(obj, up)


def foreground_mask(scene: SplatScene, views: Sequence[CameraView], masks, vote_fraction: float = 0.5) -> np.ndarray:
    """Per-splat boolean: centers voted inside the masks by at least ``vote_fraction`` of seeing views."""
    if len(views) == 0:
        raise InputError("prune_foreground needs at least one view")
    if len(masks) != len(views):
        raise InputError(f"got {len(masks)} masks for {len(views)} views")
    if not 0.0 < vote_fraction <= 1.0:
        raise InputError(f"vote_fraction must lie in (0, 1], got {vote_fraction}")
    n = len(scene)
    inside = np.zeros(n, dtype=np.int64)
    seen = np.zeros(n, dtype=np.int64)
    if n == 0:
        return np.zeros(0, dtype=bool)
    for cam, mask in zip(views, masks):
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (cam.height, cam.width):
            raise InputError(f"mask shape {mask.shape} does not match camera {cam.id!r} ({cam.height}, {cam.width})")
        pix, z = project_points(cam, scene.positions)
        with np.errstate(invalid="ignore"):
            u = np.floor(pix[:, 0] + 0.5)
            v = np.floor(pix[:, 1] + 0.5)
            ok = (z > 1e-9) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
        seen += ok
        inside[ok] += mask[v[ok].astype(np.int64), u[ok].astype(np.int64)]
    fg = np.zeros(n, dtype=bool)
    vis = seen > 0
    fg[vis] = inside[vis] / seen[vis] >= vote_fraction
    return fg


def prune_foreground(scene: SplatScene, views: Sequence[CameraView], masks,
                     vote_fraction: float = 0.5) -> tuple[SplatScene, SplatScene]:
    """Split ``scene`` into (foreground, background) by multi-view mask voting.

    Splats seen by no view go to the background. Both parts keep the
    original relative order.
    """
    fg = foreground_mask(scene, views, masks, vote_fraction)
    return scene.subset(np.flatnonzero(fg)), scene.subset(np.flatnonzero(~fg))


def asset_box(asset: SplatScene, up_hint=None) -> OrientedBBox:
    up = np.array([0.0, 1.0, 0.0]) if up_hint is None else np.asarray(up_hint, dtype=np.float64)
    if np.linalg.norm(up) == 0:
        raise InputError("asset_up_hint must be non-zero")
    pts = _as_points(asset.positions, "asset", 4)
    return _box_with_up(pts, up / np.linalg.norm(up))


def fit_asset(asset: SplatScene, bbox: OrientedBBox, asset_up_hint=None) -> SplatScene:
    """Place ``asset`` into ``bbox`` with a rotation, uniform scale and translation.

    The asset's own box (up from ``asset_up_hint``, default +y) is rotated
    onto ``bbox`` and scaled by the smallest per-axis extent ratio so the
    asset keeps its proportions.
    """
    if len(asset) == 0:
        raise InputError("cannot fit an empty asset")
    src = asset_box(asset, asset_up_hint)
    R = bbox.axes @ src.axes.T
    s = float(np.min(bbox.half_extents / src.half_extents))
    positions = bbox.center + s * (asset.positions - src.center) @ R.T
    q = quat_multiply(rotmat_to_quat(R), asset.rotations)
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return asset.replace(positions=positions, log_scales=asset.log_scales + np.log(s), rotations=q)


@dataclass(frozen=True)
class AddMode:
    bbox: OrientedBBox


@dataclass(frozen=True)
class ReplaceMode:
    views: Sequence[CameraView]
    masks: Sequence[np.ndarray]
    ground_masks: Sequence[np.ndarray] | None = None
    vote_fraction: float = 0.5


@dataclass
class IntegrationResult:
    scene: SplatScene
    inserted: np.ndarray  # indices of asset splats in ``scene``
    bbox: OrientedBBox | None = None
    metadata: dict = field(default_factory=dict)


def _fallback_ground(background: SplatScene, fg_points: np.ndarray) -> np.ndarray:
    pts = background.positions
    if len(pts) < 3:
        raise InputError("replace mode needs at least 3 background splats to infer the ground")
    mean, cov = _covariance(pts)
    axis = np.linalg.eigh(cov)[1][:, 0]
    if axis @ (fg_points.mean(axis=0) - mean) < 0:
        axis = -axis
    h = (pts - mean) @ axis
    k = max(3, int(np.ceil(GROUND_FALLBACK_FRACTION * len(pts))))
    return pts[np.argsort(h, kind="stable")[:k]]


def integrate(source: SplatScene, asset: SplatScene, mode: AddMode | ReplaceMode,
              asset_up_hint=None) -> IntegrationResult:
    """Insert ``asset`` into ``source``.

    ``AddMode`` fits the asset into a user box. ``ReplaceMode`` removes the
    masked foreground, derives a PCA box from the removed splats and fits
    the asset there. Ground points come from ``ground_masks`` when given,
    otherwise from the lowest 5% of the background along its
    smallest-variance axis; ``metadata["ground_source"]`` records which.
    """
    meta: dict = {"mode": "add" if isinstance(mode, AddMode) else "replace"}
    if isinstance(mode, AddMode):
        if len(asset) == 0:
            return IntegrationResult(source, np.zeros(0, dtype=np.int64), mode.bbox, meta)
        fitted = fit_asset(asset, mode.bbox, asset_up_hint)
        scene = merge(source, fitted)
        return IntegrationResult(scene, np.arange(len(source), len(scene)), mode.bbox, meta)

    if not isinstance(mode, ReplaceMode):
        raise InputError(f"unknown integration mode {mode!r}")
    fg = foreground_mask(source, mode.views, mode.masks, mode.vote_fraction)
    if not fg.any():
        raise NothingToReplaceError("masks select no splats to replace")
    kept = source.subset(np.flatnonzero(~fg))
    removed = source.positions[fg]
    meta["removed"] = int(fg.sum())
    ground = None
    if mode.ground_masks is not None:
        gmask = foreground_mask(kept, mode.views, mode.ground_masks, mode.vote_fraction)
        if gmask.sum() >= 3:
            ground = kept.positions[gmask]
            meta["ground_source"] = "mask"
    if ground is None:
        ground = _fallback_ground(kept, removed)
        meta["ground_source"] = "fallback_lowest_5pct"
    bbox = pca_bbox(removed, ground)
    if len(asset) == 0:
        return IntegrationResult(kept, np.zeros(0, dtype=np.int64), bbox, meta)
    scene = merge(kept, fit_asset(asset, bbox, asset_up_hint))
    return IntegrationResult(scene, np.arange(len(kept), len(scene)), bbox, meta)
