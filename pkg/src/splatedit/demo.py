"""Synthetic inputs for trying the pipeline without captured data.

The scene is a jittered ground plane with a blue blob standing on it. The
asset is a small grey ellipsoidal cloud whose up axis is +y. Replace-mode
masks are the blob's rendered silhouettes, and the reference image shows
the blob recolored to the target color.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import CameraView, orbit_cameras, save_cameras
from .imageio import write_mask, write_png
from .render import render
from .splats import SplatScene, save_ply

TARGET_COLOR = (0.85, 0.2, 0.15)
BLOB_CENTER = (0.0, 0.0, 0.45)


@dataclass
class DemoData:
    source: SplatScene
    blob: np.ndarray          # indices of blob splats in ``source``
    asset: SplatScene
    cameras: list[CameraView]
    masks: list[np.ndarray]
    ref_image: np.ndarray
    ref_mask: np.ndarray


def _identity_quats(n: int) -> np.ndarray:
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def ground_and_blob(seed: int = 0, grid: int = 14, blob_count: int = 30) -> tuple[SplatScene, np.ndarray]:
    rng = np.random.default_rng(seed)
    xs = np.linspace(-2.0, 2.0, grid)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    g_pos = np.stack([gx.ravel(), gy.ravel(), rng.normal(0.0, 0.01, grid * grid)], axis=1)
    g_col = np.clip(np.array([0.45, 0.55, 0.35]) + rng.normal(0.0, 0.05, (grid * grid, 3)), 0.0, 1.0)
    g_scale = np.tile(np.log([0.2, 0.2, 0.02]), (grid * grid, 1))

    b_pos = np.asarray(BLOB_CENTER) + rng.normal(0.0, 1.0, (blob_count, 3)) * [0.22, 0.14, 0.12]
    b_col = np.clip(np.array([0.15, 0.25, 0.8]) + rng.normal(0.0, 0.03, (blob_count, 3)), 0.0, 1.0)
    b_scale = np.full((blob_count, 3), np.log(0.1))

    n = grid * grid + blob_count
    scene = SplatScene(
        positions=np.concatenate([g_pos, b_pos]),
        log_scales=np.concatenate([g_scale, b_scale]),
        rotations=_identity_quats(n),
        opacity_logits=np.full(n, 3.0),
        colors=np.concatenate([g_col, b_col]),
    )
    return scene, np.arange(grid * grid, n)


def asset_cloud(seed: int = 1, count: int = 60) -> SplatScene:
    """Ellipsoidal cloud, long along x, up along +y."""
    rng = np.random.default_rng(seed)
    d = rng.normal(size=(count, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    pos = d * rng.uniform(0.3, 1.0, (count, 1)) ** (1 / 3) * [0.5, 0.35, 0.25]
    return SplatScene(
        positions=pos,
        log_scales=np.full((count, 3), np.log(0.07)),
        rotations=_identity_quats(count),
        opacity_logits=np.full(count, 3.0),
        colors=np.clip(0.6 + rng.normal(0.0, 0.03, (count, 3)), 0.0, 1.0),
    )


def demo_cameras(n: int = 8, size: int = 64) -> list[CameraView]:
    return orbit_cameras(n, radius=4.0, elevation=1.5, target=(0.0, 0.0, 0.3), width=size, height=size)


def make_demo(seed: int = 0, n_views: int = 8, size: int = 64) -> DemoData:
    source, blob = ground_and_blob(seed)
    cameras = demo_cameras(n_views, size)
    masks = [render(source, cam, blob).subset_mask for cam in cameras]
    colors = source.colors.copy()
    colors[blob] = TARGET_COLOR
    ref_view = render(source.replace(colors=colors), cameras[0], blob)
    return DemoData(source, blob, asset_cloud(seed + 1), cameras, masks, ref_view.rgb, ref_view.subset_mask)


def write_demo(root, seed: int = 0, n_views: int = 8, size: int = 64) -> Path:
    """Write demo inputs plus ``config.json`` under ``root``; returns the config path."""
    root = Path(root)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    data = make_demo(seed, n_views, size)
    save_ply(data.source, root / "source.ply")
    save_ply(data.asset, root / "asset.ply")
    save_cameras(data.cameras, root / "cameras.json")
    for cam, mask in zip(data.cameras, data.masks):
        write_mask(root / "masks" / f"{cam.id}.png", mask)
    write_png(root / "ref.png", data.ref_image)
    write_mask(root / "ref_mask.png", data.ref_mask)
    config = {
        "workdir": "work",
        "source_ply": "source.ply",
        "asset_ply": "asset.ply",
        "cameras": "cameras.json",
        "mode": "replace",
        "masks": "masks",
        "asset_up": [0.0, 1.0, 0.0],
        "ref_image": "ref.png",
        "ref_mask": "ref_mask.png",
        "translator": "recolor",
        "recolor_color": list(TARGET_COLOR),
        "T": 2,
        "k": min(4, n_views),
        "patch": 8,
        "iters": 10,
        "lr": 0.01,
        "seed": seed,
    }
    path = root / "config.json"
    path.write_text(json.dumps(config, indent=2) + "\n")
    return path
