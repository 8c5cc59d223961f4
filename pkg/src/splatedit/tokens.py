"""Token grids, key-view selection and epipolar-constrained token replacement.

A token grid is a lattice of feature vectors over an image; token ``(r, c)``
with stride ``s`` covers pixel rows ``r*s .. r*s+s-1`` and columns
``c*s .. c*s+s-1`` and is anchored at its pixel center
``(c*s + (s-1)/2, r*s + (s-1)/2)``.

Each foreground token of a non-key view is matched along its epipolar line
in the two nearest key views and replaced by a distance-weighted blend of
the best-matching key tokens.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

from .camera import (CameraView, MIN_DEPTH, camera_distance, epipolar_line, fundamental_matrix,
                     infinite_homography)
from .errors import DegenerateGeometryError, InputError, NoForegroundError

TOKG_MAGIC = b"TOKG"
TOKG_VERSION = 1

Weighting = Literal["direct", "inverse"]


@dataclass(eq=False)
class TokenGrid:
    tokens: np.ndarray  # (H, W, D)
    fg_mask: np.ndarray  # (H, W) bool
    stride: int = 1
    view_id: str = ""
    norms: np.ndarray | None = None  # (H, W) patch norms, set by tokenize()

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.float64)
        self.fg_mask = np.asarray(self.fg_mask, dtype=bool)
        if self.tokens.ndim != 3:
            raise InputError(f"tokens must be (H, W, D), got {self.tokens.shape}")
        if self.fg_mask.shape != self.tokens.shape[:2]:
            raise InputError(f"fg_mask shape {self.fg_mask.shape} does not match tokens {self.tokens.shape[:2]}")
        if self.stride < 1:
            raise InputError(f"stride must be >= 1, got {self.stride}")
        if not np.all(np.isfinite(self.tokens)):
            raise InputError("tokens contain NaN or Inf")

    @property
    def height(self) -> int:
        return self.tokens.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.shape[1]

    @property
    def dim(self) -> int:
        return self.tokens.shape[2]

    def token_center(self, r: int, c: int) -> tuple[float, float]:
        half = (self.stride - 1) / 2.0
        return c * self.stride + half, r * self.stride + half

    def copy(self) -> "TokenGrid":
        return TokenGrid(self.tokens.copy(), self.fg_mask.copy(), self.stride, self.view_id,
                         None if self.norms is None else self.norms.copy())


@dataclass(frozen=True)
class KeyViewSet:
    indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if not idx:
            raise InputError("key view set must be non-empty")
        if len(set(idx)) != len(idx):
            raise InputError(f"key view indices must be distinct, got {idx}")
        object.__setattr__(self, "indices", idx)

    def __contains__(self, i) -> bool:
        return i in self.indices

    def __len__(self) -> int:
        return len(self.indices)


# --------------------------------------------------------------------------
# tokenization
# --------------------------------------------------------------------------

def _patches(image: np.ndarray, patch: int) -> np.ndarray:
    h, w = image.shape[:2]
    c = image.shape[2] if image.ndim == 3 else 1
    x = image.reshape(h // patch, patch, w // patch, patch, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(h // patch, w // patch, patch * patch * c)


def tokenize(image, patch: int, mask=None, view_id: str = "") -> TokenGrid:
    """Cut ``image`` into ``patch`` x ``patch`` tiles and L2-normalize each one.

    A tile is foreground when more than half of its pixels are foreground in
    ``mask`` (everything is foreground without a mask). Zero tiles become
    zero tokens.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise InputError(f"image must be (H, W, C), got {image.shape}")
    h, w = image.shape[:2]
    if patch < 1 or h % patch or w % patch:
        raise InputError(f"patch size {patch} must divide the image size {h}x{w}")
    raw = _patches(image, patch)
    norms = np.linalg.norm(raw, axis=2)
    safe = np.where(norms > 0, norms, 1.0)
    tokens = raw / safe[..., None]
    if mask is None:
        fg = np.ones(norms.shape, dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (h, w):
            raise InputError(f"mask shape {mask.shape} does not match image {(h, w)}")
        counts = _patches(mask[..., None].astype(np.int64), patch).sum(axis=2)
        fg = 2 * counts > patch * patch
    return TokenGrid(tokens, fg, patch, view_id, norms)


def untokenize(tokens: np.ndarray, patch: int, channels: int = 3) -> np.ndarray:
    """Inverse of the tile reshape: (H, W, p*p*C) -> (H*p, W*p, C)."""
    gh, gw, _ = tokens.shape
    x = tokens.reshape(gh, gw, patch, patch, channels)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh * patch, gw * patch, channels)


def detokenize(grid: TokenGrid, base_image, changed=None) -> np.ndarray:
    """Write tokens back to pixels, rescaled by their stored patch norms.

    Only tokens flagged in ``changed`` (default: all) overwrite ``base_image``;
    other pixels are copied unchanged, so untouched regions stay bit-exact.
    """
    if grid.norms is None:
        raise InputError("grid has no patch norms; it was not produced by tokenize()")
    base = np.array(base_image, dtype=np.float64, copy=True)
    c = base.shape[2]
    if grid.dim != grid.stride * grid.stride * c:
        raise InputError(f"token dim {grid.dim} is not a {grid.stride}x{grid.stride}x{c} patch")
    pixels = untokenize(grid.tokens * grid.norms[..., None], grid.stride, c)
    if changed is None:
        changed = np.ones((grid.height, grid.width), dtype=bool)
    pix_mask = np.repeat(np.repeat(np.asarray(changed, dtype=bool), grid.stride, 0), grid.stride, 1)
    base[pix_mask] = pixels[pix_mask]
    return base


# --------------------------------------------------------------------------
# key views
# --------------------------------------------------------------------------

def select_key_views(views: Sequence[CameraView], fg_masks, k: int = 4) -> KeyViewSet:
    """Greedy farthest-point selection of viewing directions.

    Starts from the view with the largest foreground area, then repeatedly
    adds the eligible view whose direction has the largest minimum angle to
    those already chosen. Views without foreground are skipped; ties go to
    the lower index.
    """
    if not 1 <= k <= len(views):
        raise InputError(f"k must lie in [1, {len(views)}], got {k}")
    if len(fg_masks) != len(views):
        raise InputError(f"got {len(fg_masks)} masks for {len(views)} views")
    areas = np.array([int(np.count_nonzero(m)) for m in fg_masks])
    eligible = [i for i in range(len(views)) if areas[i] > 0]
    if not eligible:
        raise NoForegroundError("no view has any foreground pixels")
    dirs = np.stack([v.viewing_direction for v in views])
    first = max(eligible, key=lambda i: (areas[i], -i))
    chosen = [first]
    min_angle = np.full(len(views), np.inf)
    while len(chosen) < min(k, len(eligible)):
        last = dirs[chosen[-1]]
        min_angle = np.minimum(min_angle, np.arccos(np.clip(dirs @ last, -1.0, 1.0)))
        best, best_val = -1, -np.inf
        for i in eligible:
            if i not in chosen and min_angle[i] > best_val:
                best, best_val = i, min_angle[i]
        chosen.append(best)
    return KeyViewSet(tuple(chosen))


# --------------------------------------------------------------------------
# epipolar matching
# --------------------------------------------------------------------------

def line_samples(line, width_px: int, height_px: int, step: float) -> np.ndarray:
    """Points on ``line`` spaced ``step`` apart that fall inside the image.

    Samples sit at ``foot + k * step * (-b, a)`` for integer ``k``, where
    ``foot`` is the point of the line closest to the image center. Returns
    an (M, 3) array of ``(t, u, v)`` sorted by the line parameter ``t``.
    """
    a, b, c = line.a, line.b, line.c
    cx, cy = (width_px - 1) / 2.0, (height_px - 1) / 2.0
    dist = a * cx + b * cy + c
    fx, fy = cx - a * dist, cy - b * dist
    reach = np.hypot(width_px, height_px) / 2.0
    if abs(dist) > reach:
        return np.zeros((0, 3))
    kmax = int(np.ceil(reach / step)) + 1
    t = np.arange(-kmax, kmax + 1) * step
    u = fx - b * t
    v = fy + a * t
    ok = (u + 0.5 >= 0) & (u + 0.5 < width_px) & (v + 0.5 >= 0) & (v + 0.5 < height_px)
    return np.stack([t[ok], u[ok], v[ok]], axis=1)


def pixel_to_token(u, v, stride: int):
    return np.floor((np.asarray(v) + 0.5) / stride).astype(np.int64), \
        np.floor((np.asarray(u) + 0.5) / stride).astype(np.int64)


@dataclass(frozen=True)
class TokenMatch:
    """Best key token for one (non-key token, key view) pair; ``token`` is None without candidates."""

    key_view: int
    token: tuple[int, int] | None
    distance: float


def _check_alignment(grids, views):
    if len(grids) != len(views):
        raise InputError(f"got {len(grids)} token grids for {len(views)} views")
    for g, v in zip(grids, views):
        if (g.height * g.stride, g.width * g.stride) != (v.height, v.width):
            raise InputError(f"token grid {g.view_id!r} ({g.height}x{g.width}, stride {g.stride}) "
                             f"does not cover camera {v.id!r} ({v.height}x{v.width})")


def _best_on_line(query, key_grid: TokenGrid, key_view: CameraView, src_view: CameraView, pixel):
    """Argmax of <query, key token> over foreground key tokens on the epipolar line."""
    try:
        F = fundamental_matrix(src_view, key_view)
    except DegenerateGeometryError:
        # Shared optical center: the pixel ray maps to a single point.
        p = infinite_homography(src_view, key_view) @ np.array([pixel[0], pixel[1], 1.0])
        if p[2] <= 0:
            return None
        pts = np.array([[0.0, p[0] / p[2], p[1] / p[2]]])
        ok = (pts[:, 1] + 0.5 >= 0) & (pts[:, 1] + 0.5 < key_view.width) & \
             (pts[:, 2] + 0.5 >= 0) & (pts[:, 2] + 0.5 < key_view.height)
        pts = pts[ok]
    else:
        try:
            line = epipolar_line(F, pixel)
        except DegenerateGeometryError:
            return None
        pts = line_samples(line, key_view.width, key_view.height, float(key_grid.stride))
    if len(pts) == 0:
        return None
    rows, cols = pixel_to_token(pts[:, 1], pts[:, 2], key_grid.stride)
    fg = key_grid.fg_mask[rows, cols]
    rows, cols = rows[fg], cols[fg]
    if len(rows) == 0:
        return None
    scores = key_grid.tokens[rows, cols] @ query
    j = int(np.argmax(scores))  # first maximum = smallest line parameter
    return int(rows[j]), int(cols[j])


def nearest_keys(view_index: int, views, keys: KeyViewSet, count: int = 2) -> list[tuple[float, int]]:
    d = [(camera_distance(views[view_index], views[k]), k) for k in keys.indices]
    return sorted(d)[:count]


def replace_tokens(grids: Sequence[TokenGrid], views: Sequence[CameraView], keys: KeyViewSet,
                   weighting: Weighting = "direct", return_matches: bool = False):
    """Harmonize non-key foreground tokens with the two nearest key views.

    For token ``u`` of a non-key view with camera ``c``, each of the two
    nearest key views ``i`` (by camera-center distance ``D_i``) contributes
    its best-matching foreground token ``k_i`` along the epipolar line of
    ``u``; the replacement is ``sum(k_i w_i) / sum(w_i)`` with ``w_i = D_i``
    (``weighting="direct"``) or ``1 / D_i`` (``"inverse"``). A key whose
    center coincides with ``c`` is copied directly. Keys without candidates
    drop out; with none left the token is kept.

    Returns new grids (and, with ``return_matches``, a dict mapping
    ``(view, r, c)`` to the list of :class:`TokenMatch`).
    """
    if len(keys) < 1:
        raise InputError("need at least one key view")
    if weighting not in ("direct", "inverse"):
        raise InputError(f"unknown weighting {weighting!r}")
    _check_alignment(grids, views)
    for k in keys.indices:
        if not 0 <= k < len(views):
            raise InputError(f"key view index {k} out of range")
    out = [g.copy() for g in grids]
    matches: dict = {}
    for n, grid in enumerate(grids):
        if n in keys:
            continue
        near = nearest_keys(n, views, keys)
        for r, c in zip(*np.nonzero(grid.fg_mask)):
            query = grid.tokens[r, c]
            pixel = grid.token_center(r, c)
            found = []
            for dist, k in near:
                tok = _best_on_line(query, grids[k], views[k], views[n], pixel)
                found.append(TokenMatch(k, tok, dist))
            if return_matches:
                matches[(n, int(r), int(c))] = found
            out[n].tokens[r, c] = blend_matches(found, grids, query, weighting)
    return (out, matches) if return_matches else out


def blend_matches(found: Sequence[TokenMatch], grids, fallback: np.ndarray, weighting: Weighting) -> np.ndarray:
    usable = [m for m in found if m.token is not None]
    if not usable:
        return fallback
    for m in usable:
        if m.distance < MIN_DEPTH:
            return grids[m.key_view].tokens[m.token]
    if len(usable) == 1:
        m = usable[0]
        return grids[m.key_view].tokens[m.token]
    w = np.array([m.distance if weighting == "direct" else 1.0 / m.distance for m in usable])
    vecs = np.stack([grids[m.key_view].tokens[m.token] for m in usable])
    return (w[:, None] * vecs).sum(axis=0) / w.sum()


# --------------------------------------------------------------------------
# TOKG files
# --------------------------------------------------------------------------

def write_tokg(grid: TokenGrid, path) -> None:
    """Binary grid: magic, u32 version, H, W, D, stride, f32 tokens, u8 mask (all little-endian).

    Patch norms, when present, go to a ``.norms.npy`` sidecar.
    """
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(TOKG_MAGIC)
        fh.write(struct.pack("<5I", TOKG_VERSION, grid.height, grid.width, grid.dim, grid.stride))
        fh.write(grid.tokens.astype("<f4").tobytes())
        fh.write(grid.fg_mask.astype(np.uint8).tobytes())
    if grid.norms is not None:
        np.save(norms_path(path), grid.norms.astype("<f8"))


def norms_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".norms.npy")


def read_tokg(path, view_id: str | None = None) -> TokenGrid:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != TOKG_MAGIC or len(raw) < 24:
        raise InputError(f"{path}: not a TOKG file")
    version, h, w, d, stride = struct.unpack_from("<5I", raw, 4)
    if version != TOKG_VERSION:
        raise InputError(f"{path}: unsupported TOKG version {version}")
    n_tok = h * w * d * 4
    if len(raw) != 24 + n_tok + h * w:
        raise InputError(f"{path}: size {len(raw)} does not match header {h}x{w}x{d}")
    tokens = np.frombuffer(raw, dtype="<f4", count=h * w * d, offset=24).reshape(h, w, d).astype(np.float64)
    mask = np.frombuffer(raw, dtype=np.uint8, count=h * w, offset=24 + n_tok).reshape(h, w) != 0
    npath = norms_path(path)
    norms = np.load(npath) if npath.exists() else None
    return TokenGrid(tokens, mask, int(stride), path.stem if view_id is None else view_id, norms)
