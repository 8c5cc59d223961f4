"""CPU Gaussian-splat rasterizer with analytic appearance gradients.

Forward model, per pixel ``p`` and depth-sorted visible splats ``i``::

    alpha_i(p) = sigmoid(opacity_logit_i) * exp(-0.5 * d^T Sigma2_i^-1 d)   (0 beyond `cutoff` sigma)
    T_i(p)     = prod_{j<i} (1 - alpha_j(p))
    rgb(p)     = sum_i T_i alpha_i color_i + T_end * background

``Sigma2`` is the EWA projection ``J W Sigma W^T J^T`` of the splat covariance.
Pixels are evaluated at integer coordinates (pixel centers).

The image is processed in fixed row bands; bands are independent, so they
may run on a thread pool without changing a single output bit. Per-splat
gradient partials are reduced in band order.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .camera import CameraView, quats_to_rotmats
from .errors import InputError
from .splats import SplatScene, sigmoid

BAND_ROWS = 32
# Mahalanobis cutoff. At 4 sigma the dropped tail is at most exp(-8) ~ 3.4e-4 of
# a splat's opacity, which keeps truncated renders within 2e-3 of exact ones.
DEFAULT_CUTOFF = 4.0
MASK_THRESHOLD = 0.5


@dataclass
class RenderedView:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), alpha-weighted mean depth, 0 where alpha == 0
    alpha: np.ndarray  # (H, W)
    subset_mask: np.ndarray | None = None  # (H, W) bool


@dataclass
class SplatGradients:
    color: np.ndarray  # (N, 3)
    opacity_logit: np.ndarray  # (N,)


@dataclass
class Projection:
    """Screen-space footprint of every splat for one camera."""

    means: np.ndarray  # (N, 2)
    depths: np.ndarray  # (N,)
    cov: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 3): inverse covariance entries (a, b, c) for a dx^2 + 2b dx dy + c dy^2
    valid: np.ndarray  # (N,) bool
    order: np.ndarray  # visible splat indices, front to back


def covariances_3d(scene: SplatScene) -> np.ndarray:
    R = quats_to_rotmats(scene.rotations) if len(scene) else np.zeros((0, 3, 3))
    M = R * scene.scales[:, None, :]
    return M @ np.transpose(M, (0, 2, 1))


def project_splats(scene: SplatScene, camera: CameraView, near: float = 0.01) -> Projection:
    n = len(scene)
    pc = camera.to_camera(scene.positions) if n else np.zeros((0, 3))
    z = pc[:, 2]
    valid = z > near
    zs = np.where(valid, z, 1.0)
    means = np.stack([camera.fx * pc[:, 0] / zs + camera.cx, camera.fy * pc[:, 1] / zs + camera.cy], axis=1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = camera.fx / zs
    J[:, 0, 2] = -camera.fx * pc[:, 0] / zs**2
    J[:, 1, 1] = camera.fy / zs
    J[:, 1, 2] = -camera.fy * pc[:, 1] / zs**2
    T = J @ camera.rotation
    cov = T @ covariances_3d(scene) @ np.transpose(T, (0, 2, 1))
    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
    valid &= det > 0
    dets = np.where(valid, det, 1.0)
    conic = np.stack([cov[:, 1, 1] / dets, -cov[:, 0, 1] / dets, cov[:, 0, 0] / dets], axis=1)
    idx = np.flatnonzero(valid)
    # lexsort: last key is primary; equal depths fall back to original index.
    order = idx[np.lexsort((idx, z[idx]))]
    return Projection(means, z, cov, conic, valid, order)


def _footprint(proj: Projection, i: int, cutoff: float, width: int, r0: int, r1: int):
    """Pixel window covering splat ``i``'s cutoff ellipse inside rows [r0, r1)."""
    mx, my = proj.means[i]
    rx = cutoff * np.sqrt(proj.cov[i, 0, 0])
    ry = cutoff * np.sqrt(proj.cov[i, 1, 1])
    u0 = max(int(np.ceil(mx - rx)), 0)
    u1 = min(int(np.floor(mx + rx)) + 1, width)
    v0 = max(int(np.ceil(my - ry)), r0)
    v1 = min(int(np.floor(my + ry)) + 1, r1)
    if u0 >= u1 or v0 >= v1:
        return None
    return u0, u1, v0, v1


def _gaussian_patch(proj: Projection, i: int, cutoff: float, win) -> np.ndarray:
    u0, u1, v0, v1 = win
    dx = np.arange(u0, u1, dtype=np.float64)[None, :] - proj.means[i, 0]
    dy = np.arange(v0, v1, dtype=np.float64)[:, None] - proj.means[i, 1]
    a, b, c = proj.conic[i]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    return np.where(q <= cutoff * cutoff, np.exp(-0.5 * q), 0.0)


@dataclass
class _BandState:
    r0: int
    r1: int
    rgb: np.ndarray
    depth_acc: np.ndarray
    trans: np.ndarray
    subset_acc: np.ndarray | None
    records: list  # (splat index, window, alpha patch, transmittance-before patch)


def _forward_band(scene, proj, camera, cutoff, subset_flags, r0, r1, keep):
    h, w = r1 - r0, camera.width
    rgb = np.zeros((h, w, 3))
    depth_acc = np.zeros((h, w))
    trans = np.ones((h, w))
    sub = np.zeros((h, w)) if subset_flags is not None else None
    opac = scene.opacities
    records = []
    for i in proj.order:
        win = _footprint(proj, i, cutoff, w, r0, r1)
        if win is None:
            continue
        u0, u1, v0, v1 = win
        alpha = opac[i] * _gaussian_patch(proj, i, cutoff, win)
        sl = (slice(v0 - r0, v1 - r0), slice(u0, u1))
        t_before = trans[sl]
        wgt = alpha * t_before
        rgb[sl] += wgt[..., None] * scene.colors[i]
        depth_acc[sl] += wgt * proj.depths[i]
        if sub is not None and subset_flags[i]:
            sub[sl] += wgt
        if keep:
            records.append((i, win, alpha, t_before.copy()))
        trans[sl] = t_before * (1.0 - alpha)
    rgb += trans[..., None] * scene.background
    return _BandState(r0, r1, rgb, depth_acc, trans, sub, records)


def _bands(height: int):
    return [(r, min(r + BAND_ROWS, height)) for r in range(0, height, BAND_ROWS)]


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class RenderContext:
    """Forward-pass state consumed by :func:`backward`."""

    scene: SplatScene
    camera: CameraView
    projection: Projection
    bands: list


def rasterize(scene: SplatScene, camera: CameraView, subset=None, *, cutoff: float = DEFAULT_CUTOFF,
              near: float = 0.01, workers: int = 1, keep_context: bool = False):
    """Render and optionally keep the state needed for :func:`backward`.

    Returns ``(RenderedView, RenderContext | None)``.
    """
    proj = project_splats(scene, camera, near)
    flags = None
    if subset is not None:
        flags = np.zeros(len(scene), dtype=bool)
        flags[np.asarray(list(subset), dtype=np.int64)] = True
    bands = _map(lambda rb: _forward_band(scene, proj, camera, cutoff, flags, rb[0], rb[1], keep_context),
                 _bands(camera.height), workers)
    rgb = np.concatenate([b.rgb for b in bands])
    trans = np.concatenate([b.trans for b in bands])
    depth_acc = np.concatenate([b.depth_acc for b in bands])
    alpha = 1.0 - trans
    depth = np.zeros_like(alpha)
    hit = alpha > 0
    depth[hit] = depth_acc[hit] / alpha[hit]
    mask = None
    if flags is not None:
        mask = np.concatenate([b.subset_acc for b in bands]) >= MASK_THRESHOLD
    view = RenderedView(rgb=rgb, depth=depth, alpha=alpha, subset_mask=mask)
    ctx = RenderContext(scene, camera, proj, bands) if keep_context else None
    return view, ctx


def render(scene: SplatScene, camera: CameraView, subset=None, *, cutoff: float = DEFAULT_CUTOFF,
           near: float = 0.01, workers: int = 1) -> RenderedView:
    """Render ``scene`` from ``camera``.

    Splats whose center lies closer than ``near`` (or behind the camera) are
    skipped. ``subset`` (splat indices) produces ``subset_mask``: pixels where
    the subset's visible accumulated alpha reaches 0.5.
    """
    view, _ = rasterize(scene, camera, subset, cutoff=cutoff, near=near, workers=workers)
    return view


def _backward_band(ctx: RenderContext, band: _BandState, grad_rgb: np.ndarray):
    scene = ctx.scene
    n = len(scene)
    g_color = np.zeros((n, 3))
    g_alpha_sum = np.zeros(n)
    r0 = band.r0
    g = grad_rgb[band.r0:band.r1]
    behind = np.broadcast_to(scene.background, g.shape).copy()
    for i, (u0, u1, v0, v1), alpha, t_before in reversed(band.records):
        sl = (slice(v0 - r0, v1 - r0), slice(u0, u1))
        gp = g[sl]
        wgt = alpha * t_before
        g_color[i] += np.einsum("hw,hwc->c", wgt, gp)
        b = behind[sl]
        g_alpha = t_before * np.einsum("hwc,hwc->hw", gp, scene.colors[i] - b)
        # d alpha / d logit = alpha * (1 - sigmoid(logit)); applied after the reduction.
        g_alpha_sum[i] += np.sum(g_alpha * alpha)
        behind[sl] = alpha[..., None] * scene.colors[i] + (1.0 - alpha[..., None]) * b
    return g_color, g_alpha_sum


def backward(ctx: RenderContext, grad_rgb, *, workers: int = 1) -> SplatGradients:
    """Gradients of ``sum(grad_rgb * rgb)`` w.r.t. splat colors and opacity logits."""
    grad_rgb = np.asarray(grad_rgb, dtype=np.float64)
    cam = ctx.camera
    if grad_rgb.shape != (cam.height, cam.width, 3):
        raise InputError(f"grad_rgb shape {grad_rgb.shape} does not match render {(cam.height, cam.width, 3)}")
    n = len(ctx.scene)
    parts = _map(lambda b: _backward_band(ctx, b, grad_rgb), ctx.bands, workers)
    g_color = np.zeros((n, 3))
    g_alpha = np.zeros(n)
    for gc, ga in parts:
        g_color += gc
        g_alpha += ga
    g_logit = g_alpha * (1.0 - sigmoid(ctx.scene.opacity_logits))
    return SplatGradients(color=g_color, opacity_logit=g_logit)


def render_backward(scene: SplatScene, camera: CameraView, grad_rgb, *, cutoff: float = DEFAULT_CUTOFF,
                    near: float = 0.01, workers: int = 1) -> SplatGradients:
    """Analytic gradients of the composited rgb, including the cutoff truncation."""
    _, ctx = rasterize(scene, camera, cutoff=cutoff, near=near, workers=workers, keep_context=True)
    return backward(ctx, grad_rgb, workers=workers)
