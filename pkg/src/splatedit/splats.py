"""Gaussian-splat scene model and binary PLY interchange.

Scenes are stored column-wise (one numpy array per attribute) so that the
renderer and optimizer can work on whole attribute blocks. Opacity and
scale stay in their pre-activation form exactly as they appear on disk;
activations happen at render time.

The on-disk layout is the de-facto 3DGS one::

    x y z f_dc_0 f_dc_1 f_dc_2 [f_rest_*] opacity scale_0..2 rot_0..3

Higher SH bands (``f_rest_*``) are carried through untouched.
"""

from __future__ import annotations

import dataclasses
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import InputError, PlyFormatError, UnsupportedEncodingError

SH_C0 = 0.28209479177387814

# Rotations whose norm is already this close to 1 are kept bit-for-bit so
# that save/load cycles stay lossless.
QUAT_NORM_TOL = 1e-6

REQUIRED_FIELDS = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}

_F_REST = re.compile(r"^f_rest_(\d+)$")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class GaussianSplat:
    """A single splat, as returned by indexing a :class:`SplatScene`."""

    position: np.ndarray
    log_scale: np.ndarray
    rotation: np.ndarray  # (w, x, y, z)
    opacity_logit: float
    color: np.ndarray
    sh_rest: np.ndarray | None = None

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


def _frozen(a, shape_tail: tuple[int, ...], name: str, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    if arr.size == 0:
        arr = arr.reshape((0,) + shape_tail)
    if arr.ndim != 1 + len(shape_tail) or arr.shape[1:] != shape_tail:
        raise InputError(f"{name} must have shape (N, {', '.join(map(str, shape_tail))}), got {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class SplatScene:
    """An ordered, immutable collection of Gaussian splats.

    Use :meth:`replace` to derive modified scenes.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    sh_rest: np.ndarray | None = None
    background: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "positions", _frozen(self.positions, (3,), "positions"))
        n = len(self.positions)
        set_(self, "log_scales", _frozen(self.log_scales, (3,), "log_scales"))
        set_(self, "rotations", _frozen(self.rotations, (4,), "rotations"))
        set_(self, "colors", _frozen(self.colors, (3,), "colors"))
        ol = np.array(self.opacity_logits, dtype=np.float64, copy=True).reshape(-1)
        ol.setflags(write=False)
        set_(self, "opacity_logits", ol)
        if self.sh_rest is not None:
            sh = np.array(self.sh_rest, dtype=np.float32, copy=True)
            if sh.ndim != 2 or len(sh) != n:
                raise InputError(f"sh_rest must have shape (N, K), got {sh.shape}")
            sh.setflags(write=False)
            set_(self, "sh_rest", sh)
        bg = np.array(self.background, dtype=np.float64, copy=True).reshape(3)
        bg.setflags(write=False)
        set_(self, "background", bg)
        for name in ("log_scales", "rotations", "colors", "opacity_logits"):
            if len(getattr(self, name)) != n:
                raise InputError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        for name in ("positions", "log_scales", "rotations", "colors", "opacity_logits", "background"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise InputError(f"{name} contains NaN or Inf")

    @classmethod
    def empty(cls, background=(0.0, 0.0, 0.0)) -> "SplatScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0), np.zeros((0, 3)),
                   background=background)

    @classmethod
    def from_splats(cls, splats: Iterable[GaussianSplat], background=(0.0, 0.0, 0.0)) -> "SplatScene":
        splats = list(splats)
        if not splats:
            return cls.empty(background)
        sh = None
        if any(s.sh_rest is not None for s in splats):
            sh = np.stack([np.asarray(s.sh_rest, dtype=np.float32) for s in splats])
        return cls(
            positions=[s.position for s in splats],
            log_scales=[s.log_scale for s in splats],
            rotations=[s.rotation for s in splats],
            opacity_logits=[s.opacity_logit for s in splats],
            colors=[s.color for s in splats],
            sh_rest=sh,
            background=background,
        )

    def __len__(self) -> int:
        return len(self.positions)

    def __getitem__(self, i: int) -> GaussianSplat:
        return GaussianSplat(
            position=self.positions[i],
            log_scale=self.log_scales[i],
            rotation=self.rotations[i],
            opacity_logit=float(self.opacity_logits[i]),
            color=self.colors[i],
            sh_rest=None if self.sh_rest is None else self.sh_rest[i],
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    def replace(self, **changes) -> "SplatScene":
        return dataclasses.replace(self, **changes)

    def subset(self, indices) -> "SplatScene":
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        return SplatScene(
            self.positions[idx], self.log_scales[idx], self.rotations[idx],
            self.opacity_logits[idx], self.colors[idx],
            sh_rest=None if self.sh_rest is None else self.sh_rest[idx],
            background=self.background,
        )

    def equals(self, other: "SplatScene") -> bool:
        """Exact field-wise equality, including background and sh_rest."""
        if len(self) != len(other):
            return False
        for name in ("positions", "log_scales", "rotations", "opacity_logits", "colors", "background"):
            if not np.array_equal(getattr(self, name), getattr(other, name)):
                return False
        if (self.sh_rest is None) != (other.sh_rest is None):
            return False
        return self.sh_rest is None or np.array_equal(self.sh_rest, other.sh_rest)


def merge(a: SplatScene, b: SplatScene) -> SplatScene:
    """Concatenate ``b`` after ``a``; the background is taken from ``a``.

    When only one side carries higher SH coefficients, or the two sides carry
    different band counts, missing coefficients are zero-filled.
    """
    sh = None
    if a.sh_rest is not None or b.sh_rest is not None:
        k = max(x.sh_rest.shape[1] for x in (a, b) if x.sh_rest is not None)
        sh = np.zeros((len(a) + len(b), k), dtype=np.float32)
        if a.sh_rest is not None:
            sh[: len(a), : a.sh_rest.shape[1]] = a.sh_rest
        if b.sh_rest is not None:
            sh[len(a):, : b.sh_rest.shape[1]] = b.sh_rest
    return SplatScene(
        np.concatenate([a.positions, b.positions]),
        np.concatenate([a.log_scales, b.log_scales]),
        np.concatenate([a.rotations, b.rotations]),
        np.concatenate([a.opacity_logits, b.opacity_logits]),
        np.concatenate([a.colors, b.colors]),
        sh_rest=sh,
        background=a.background,
    )


# --------------------------------------------------------------------------
# PLY I/O
# --------------------------------------------------------------------------

def _parse_header(raw: bytes, path) -> tuple[list[tuple[str, int, list[tuple[str, str | None]]]], int]:
    end = raw.find(b"end_header")
    if not raw.startswith(b"ply") or end < 0:
        raise PlyFormatError(f"{path}: not a PLY file")
    nl = raw.find(b"\n", end)
    if nl < 0:
        raise PlyFormatError(f"{path}: truncated header")
    header = raw[:end].decode("ascii", errors="replace").splitlines()
    elements: list[tuple[str, int, list[tuple[str, str | None]]]] = []
    fmt = None
    for line in header[1:]:
        tok = line.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            fmt = tok[1] if len(tok) > 1 else ""
        elif tok[0] == "element":
            if len(tok) != 3:
                raise PlyFormatError(f"{path}: bad element line {line!r}")
            elements.append((tok[1], int(tok[2]), []))
        elif tok[0] == "property":
            if not elements:
                raise PlyFormatError(f"{path}: property before any element")
            if tok[1] == "list":
                elements[-1][2].append((tok[-1], None))
            else:
                if tok[1] not in _PLY_TYPES:
                    raise PlyFormatError(f"{path}: unknown property type {tok[1]!r}")
                elements[-1][2].append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise UnsupportedEncodingError(f"{path}: unsupported PLY encoding {fmt!r}; need binary_little_endian")
    return elements, nl + 1


def load_ply(path, background=(0.0, 0.0, 0.0)) -> SplatScene:
    """Read a binary little-endian 3DGS PLY file.

    Colors are decoded from the degree-0 SH coefficients and clamped to
    [0, 1]; scales and opacities are kept raw. Rotations are renormalized
    when their norm is off by more than ``QUAT_NORM_TOL``.

    Raises:
        UnsupportedEncodingError: ASCII or big-endian payloads.
        PlyFormatError: missing fields, truncated or non-finite data.
    """
    raw = Path(path).read_bytes()
    elements, offset = _parse_header(raw, path)
    vertex = None
    for name, count, props in elements:
        if name == "vertex":
            vertex = (count, props)
            break
        if any(t is None for _, t in props):
            raise PlyFormatError(f"{path}: cannot skip list-valued element {name!r} before vertices")
        offset += count * np.dtype([(p, "<" + t) for p, t in props]).itemsize
    if vertex is None:
        raise PlyFormatError(f"{path}: no vertex element")
    count, props = vertex
    if any(t is None for _, t in props):
        raise PlyFormatError(f"{path}: list properties on vertices are not supported")
    names = [p for p, _ in props]
    for field in REQUIRED_FIELDS:
        if field not in names:
            raise PlyFormatError(f"{path}: missing required vertex property {field!r}")
    dtype = np.dtype([(p, "<" + t) for p, t in props])
    if len(raw) - offset < count * dtype.itemsize:
        raise PlyFormatError(f"{path}: payload truncated ({len(raw) - offset} bytes for {count} vertices)")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)

    def cols(*fields):
        return np.stack([data[f].astype(np.float64) for f in fields], axis=1) if count else np.zeros((0, len(fields)))

    positions = cols("x", "y", "z")
    log_scales = cols("scale_0", "scale_1", "scale_2")
    rotations = cols("rot_0", "rot_1", "rot_2", "rot_3")
    opacity = data["opacity"].astype(np.float64)
    f_dc = cols("f_dc_0", "f_dc_1", "f_dc_2")
    rest = sorted(((int(m.group(1)), n) for n in names if (m := _F_REST.match(n))))
    sh_rest = None
    if rest:
        sh_rest = np.stack([data[n].astype(np.float32) for _, n in rest], axis=1) if count \
            else np.zeros((0, len(rest)), np.float32)
        if not np.all(np.isfinite(sh_rest)):
            raise PlyFormatError(f"{path}: non-finite f_rest values")

    for label, arr in (("position", positions), ("scale", log_scales), ("rotation", rotations),
                       ("opacity", opacity), ("f_dc", f_dc)):
        if not np.all(np.isfinite(arr)):
            raise PlyFormatError(f"{path}: non-finite {label} values")
    if not np.all(np.isfinite(np.exp(log_scales))):
        raise PlyFormatError(f"{path}: scale overflows on activation")

    norms = np.linalg.norm(rotations, axis=1)
    if np.any(norms == 0):
        raise PlyFormatError(f"{path}: zero-length rotation quaternion")
    off = np.abs(norms - 1.0) > QUAT_NORM_TOL
    rotations[off] /= norms[off, None]

    colors = np.clip(0.5 + SH_C0 * f_dc, 0.0, 1.0)
    return SplatScene(positions, log_scales, rotations, opacity, colors, sh_rest=sh_rest, background=background)


def ply_dtype(n_rest: int = 0) -> np.dtype:
    fields = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2"]
    fields += [f"f_rest_{i}" for i in range(n_rest)]
    fields += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return np.dtype([(f, "<f4") for f in fields])


def encode_vertices(scene: SplatScene) -> np.ndarray:
    """Pack a scene into the float32 vertex records written by :func:`save_ply`."""
    n_rest = 0 if scene.sh_rest is None else scene.sh_rest.shape[1]
    rec = np.zeros(len(scene), dtype=ply_dtype(n_rest))
    for i, f in enumerate("xyz"):
        rec[f] = scene.positions[:, i]
    f_dc = (scene.colors - 0.5) / SH_C0
    for i in range(3):
        rec[f"f_dc_{i}"] = f_dc[:, i]
        rec[f"scale_{i}"] = scene.log_scales[:, i]
    for i in range(n_rest):
        rec[f"f_rest_{i}"] = scene.sh_rest[:, i]
    rec["opacity"] = scene.opacity_logits
    for i in range(4):
        rec[f"rot_{i}"] = scene.rotations[:, i]
    return rec


def save_ply(scene: SplatScene, path) -> None:
    rec = encode_vertices(scene)
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rec)}"]
    lines += [f"property float {name}" for name in rec.dtype.names]
    lines.append("end_header")
    header = ("\n".join(lines) + "\n").encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())

