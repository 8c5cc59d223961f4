"""Image similarity and iterative expansion of the translator's training set.

Each round, every render is translated with the current training set and
the translation least similar (summed over all training images) joins the
set. Selected translations are frozen: later rounds never re-translate
them into the set.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Protocol, Sequence

import numpy as np

from .errors import InputError, PipelineError, ScoreLookupError, SplatEditError
from .imageio import read_png, write_png

NEGATIVE_PROMPT = "ugly, deformed, disfigured, poor details, bad anatomy, cartoon, CGI, unrealistic"
VAR_EPS = 1e-12
MEAN_EPS = 1e-6


@dataclass(eq=False)
class ImageEntry:
    id: str
    image: np.ndarray
    fg_mask: np.ndarray | None = None

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        if not np.all(np.isfinite(self.image)):
            raise InputError(f"image {self.id!r} has non-finite values")
        if self.fg_mask is not None:
            self.fg_mask = np.asarray(self.fg_mask, dtype=bool)
            if self.fg_mask.shape != self.image.shape[:2]:
                raise InputError(f"mask of {self.id!r} does not match its image")


class ImageSet:
    """Ordered collection of images with unique ids."""

    def __init__(self, entries: Iterable[ImageEntry] = ()):
        self.entries: list[ImageEntry] = list(entries)
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InputError(f"duplicate image ids in {ids}")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[ImageEntry]:
        return iter(self.entries)

    def __getitem__(self, key: str) -> ImageEntry:
        for e in self.entries:
            if e.id == key:
                return e
        raise KeyError(key)

    def __contains__(self, key: str) -> bool:
        return any(e.id == key for e in self.entries)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def appended(self, entry: ImageEntry) -> "ImageSet":
        return ImageSet([*self.entries, entry])

    def without(self, ids) -> "ImageSet":
        drop = set(ids)
        return ImageSet([e for e in self.entries if e.id not in drop])


# --------------------------------------------------------------------------
# similarity backends
# --------------------------------------------------------------------------

def _fg_crop(a: ImageEntry, b: ImageEntry, patch: int) -> tuple[np.ndarray, np.ndarray]:
    masks = [m for m in (a.fg_mask, b.fg_mask) if m is not None]
    x, y = a.image, b.image
    if not masks:
        return x, y
    union = np.logical_or.reduce(masks)
    if not union.any():
        return x, y
    x = np.where(a.fg_mask[..., None], x, 0.0) if a.fg_mask is not None else x
    y = np.where(b.fg_mask[..., None], y, 0.0) if b.fg_mask is not None else y
    h, w = union.shape
    rows, cols = np.nonzero(union)

    def span(lo, hi, size):
        lo, hi = int(lo), int(hi) + 1
        if hi - lo < patch:
            lo = max(0, min(lo, size - patch))
            hi = min(size, lo + patch)
        return lo, hi

    r0, r1 = span(rows.min(), rows.max(), h)
    c0, c1 = span(cols.min(), cols.max(), w)
    return x[r0:r1, c0:c1], y[r0:r1, c0:c1]


def patch_ncc(x: np.ndarray, y: np.ndarray, patch: int) -> np.ndarray:
    """Zero-mean NCC of aligned non-overlapping patches, clamped at 0.

    Near-constant patches (variance < 1e-12) score 1 when both are constant
    with means within 1e-6, else 0.
    """
    h = (x.shape[0] // patch) * patch
    w = (x.shape[1] // patch) * patch
    if h == 0 or w == 0:
        raise InputError(f"image {x.shape[:2]} smaller than similarity patch {patch}")
    c = x.shape[2] if x.ndim == 3 else 1

    def tiles(img):
        t = img[:h, :w].reshape(h // patch, patch, w // patch, patch, c)
        return t.transpose(0, 2, 1, 3, 4).reshape(-1, patch * patch * c)

    px, py = tiles(x), tiles(y)
    mx, my = px.mean(axis=1), py.mean(axis=1)
    dx, dy = px - mx[:, None], py - my[:, None]
    vx, vy = (dx * dx).mean(axis=1), (dy * dy).mean(axis=1)
    flat_x, flat_y = vx < VAR_EPS, vy < VAR_EPS
    out = np.zeros(len(px))
    both = flat_x & flat_y
    out[both] = (np.abs(mx[both] - my[both]) <= MEAN_EPS).astype(np.float64)
    ok = ~flat_x & ~flat_y
    ncc = (dx[ok] * dy[ok]).sum(axis=1) / np.sqrt((dx[ok] ** 2).sum(axis=1) * (dy[ok] ** 2).sum(axis=1))
    out[ok] = np.clip(ncc, 0.0, 1.0)
    return out


@dataclass(frozen=True)
class NCCSimilarity:
    """Mean clamped patch NCC over the (foreground-cropped) images."""

    patch: int = 8

    def __post_init__(self):
        if self.patch < 2:
            raise InputError(f"NCC patch size must be >= 2, got {self.patch}")

    def score(self, a: ImageEntry, b: ImageEntry) -> float:
        if a.image.shape != b.image.shape:
            raise InputError(f"image size mismatch: {a.id!r} {a.image.shape} vs {b.id!r} {b.image.shape}")
        x, y = _fg_crop(a, b, self.patch)
        return float(patch_ncc(x, y, self.patch).mean())


@dataclass
class ExternalScores:
    """Precomputed pairwise scores, looked up in either order."""

    scores: Mapping[tuple[str, str], float] = field(default_factory=dict)

    @classmethod
    def from_csv(cls, path) -> "ExternalScores":
        table: dict[tuple[str, str], float] = {}
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[:2] == ["id_a", "id_b"]:
                    continue
                if len(row) != 3:
                    raise InputError(f"{path}: expected 'id_a,id_b,score', got {row}")
                table[(row[0].strip(), row[1].strip())] = float(row[2])
        return cls(table)

    def score(self, a: ImageEntry, b: ImageEntry) -> float:
        for key in ((a.id, b.id), (b.id, a.id)):
            if key in self.scores:
                return float(self.scores[key])
        raise ScoreLookupError(f"no score for pair ({a.id!r}, {b.id!r})")


class SimilarityBackend(Protocol):
    def score(self, a: ImageEntry, b: ImageEntry) -> float: ...


def similarity(a: ImageEntry, b: ImageEntry, backend: SimilarityBackend) -> float:
    return backend.score(a, b)


def select_augment(train: ImageSet, candidates: ImageSet,
                   backend: SimilarityBackend) -> tuple[str, dict[str, dict]]:
    """Pick the candidate with the smallest summed similarity to the training set.

    Returns ``(chosen_id, table)`` where ``table[candidate_id]`` holds the
    per-training-image ``scores`` and their ``total``. Ties keep the earlier
    candidate.
    """
    if len(candidates) == 0 or len(train) == 0:
        raise InputError("select_augment needs non-empty training and candidate sets")
    table: dict[str, dict] = {}
    best_id, best_total = None, np.inf
    for cand in candidates:
        scores = {t.id: backend.score(cand, t) for t in train}
        total = float(sum(scores.values()))
        table[cand.id] = {"scores": scores, "total": total}
        if total < best_total:
            best_id, best_total = cand.id, total
    if best_id is None:  # every total was NaN or +inf
        best_id = candidates.entries[0].id
    return best_id, table


# --------------------------------------------------------------------------
# translators
# --------------------------------------------------------------------------

class Translator(Protocol):
    def translate(self, iteration: int, train: ImageSet, renders: ImageSet) -> ImageSet: ...


class IdentityTranslator:
    """Returns the renders unchanged."""

    def translate(self, iteration: int, train: ImageSet, renders: ImageSet) -> ImageSet:
        return ImageSet(ImageEntry(e.id, e.image.copy(), e.fg_mask) for e in renders)


@dataclass
class RecolorTranslator:
    """Scripted stand-in: blends foreground pixels toward a fixed color."""

    color: Sequence[float] = (1.0, 0.0, 0.0)
    strength: float = 1.0

    def translate(self, iteration: int, train: ImageSet, renders: ImageSet) -> ImageSet:
        target = np.asarray(self.color, dtype=np.float64)
        out = []
        for e in renders:
            img = e.image.copy()
            if e.fg_mask is not None:
                img[e.fg_mask] = (1 - self.strength) * img[e.fg_mask] + self.strength * target
            out.append(ImageEntry(e.id, img, e.fg_mask))
        return ImageSet(out)


@dataclass
class DirectoryTranslator:
    """File-based handshake with an external translation process.

    For round ``t`` this writes ``<root>/iter_<t>/request.json`` plus
    ``renders/<id>.png`` and ``train/<id>.png``, then polls until the
    translator creates ``iter_<t>/done`` next to ``translated/<id>.png``
    for every render.
    """

    root: Path
    prompt: str = ""
    negative_prompt: str = NEGATIVE_PROMPT
    timeout: float = 600.0
    poll_interval: float = 0.2

    def round_dir(self, iteration) -> Path:
        return Path(self.root) / f"iter_{iteration}"

    def translate(self, iteration: int, train: ImageSet, renders: ImageSet) -> ImageSet:
        d = self.round_dir(iteration)
        (d / "renders").mkdir(parents=True, exist_ok=True)
        (d / "train").mkdir(parents=True, exist_ok=True)
        for e in renders:
            write_png(d / "renders" / f"{e.id}.png", e.image)
        for e in train:
            write_png(d / "train" / f"{e.id}.png", e.image)
        request = {"prompt": self.prompt, "negative_prompt": self.negative_prompt,
                   "train_ids": train.ids, "render_ids": renders.ids}
        (d / "request.json").write_text(json.dumps(request, indent=2) + "\n")
        deadline = time.monotonic() + self.timeout
        while not (d / "done").exists():
            if time.monotonic() > deadline:
                raise PipelineError(f"translator timed out after {self.timeout}s waiting for {d / 'done'}",
                                    iteration)
            time.sleep(self.poll_interval)
        out = []
        for e in renders:
            p = d / "translated" / f"{e.id}.png"
            if not p.exists():
                raise PipelineError(f"translator protocol violation: missing {p}", iteration)
            img = read_png(p)
            if img.shape != e.image.shape:
                raise PipelineError(f"translator protocol violation: {p} has shape {img.shape}, "
                                    f"expected {e.image.shape}", iteration)
            out.append(ImageEntry(e.id, img, e.fg_mask))
        return ImageSet(out)


def run_iterations(initial_ref: ImageEntry, renders: ImageSet, translator: Translator, T: int,
                   backend: SimilarityBackend, log: list | None = None) -> ImageSet:
    """Grow the training set from ``{initial_ref}`` by one translation per round.

    Returns the training set after ``T`` rounds (``T + 1`` images). Renders
    picked in earlier rounds are removed from later candidate pools. When
    ``log`` is given, one dict per round (pool, chosen id, score table) is
    appended to it.
    """
    if T < 1:
        raise InputError(f"T must be >= 1, got {T}")
    train = ImageSet([initial_ref])
    picked: list[str] = []
    for t in range(1, T + 1):
        try:
            translated = translator.translate(t, train, renders)
        except PipelineError as exc:
            if exc.iteration is None:
                exc.iteration = t
            raise
        except SplatEditError:
            raise
        except Exception as exc:
            raise PipelineError(f"translator failed in round {t}: {exc}", t) from exc
        if sorted(translated.ids) != sorted(renders.ids):
            raise PipelineError(f"translator returned ids {translated.ids}, expected {renders.ids}", t)
        pool = translated.without(picked)
        if len(pool) == 0:
            raise PipelineError(f"no candidates left in round {t}", t)
        chosen, table = select_augment(train, pool, backend)
        picked.append(chosen)
        train = train.appended(pool[chosen])
        if log is not None:
            log.append({"iteration": t, "pool": pool.ids, "chosen": chosen, "table": table})
    return train
