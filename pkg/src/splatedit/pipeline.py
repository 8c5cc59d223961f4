"""Stage orchestration over a working directory.

Stages run in order ``integrate -> render -> select -> harmonize -> finetune``.
Each writes its artifacts to ``<workdir>/<stage>/`` together with a
``manifest.json`` recording input hashes, the stage-relevant configuration,
its hash and the hashes of every output file. A stage whose manifest
matches the current inputs and configuration, and whose outputs are intact,
is skipped, so re-running a finished workdir changes nothing.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import shutil
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .camera import CameraView, load_cameras, orbit_cameras, save_cameras
from .edit import AddMode, OrientedBBox, ReplaceMode, integrate
from .errors import DivergedError, InputError, PipelineError
from .imageio import read_mask, read_png, write_depth, write_mask, write_png
from .optim import LossConfig, finetune, write_loss_log
from .render import DEFAULT_CUTOFF, render
from .selection import (DirectoryTranslator, ExternalScores, IdentityTranslator, ImageEntry, ImageSet,
                        NCCSimilarity, RecolorTranslator, run_iterations)
from .splats import load_ply, save_ply
from .tokens import detokenize, read_tokg, replace_tokens, select_key_views, tokenize, write_tokg

STAGES = ("integrate", "render", "select", "harmonize", "finetune")
MANIFEST = "manifest.json"
LOCK = ".lock"

PATH_FIELDS = ("source_ply", "asset_ply", "ref_image", "ref_mask", "cameras", "bbox", "masks",
               "ground_masks", "tokens_dir", "scores_csv", "translator_dir")

# Configuration fields each stage depends on (paths are tracked as input hashes instead).
STAGE_FIELDS = {
    "integrate": ("mode", "asset_up", "vote_fraction", "n_views", "width", "height", "background"),
    "render": ("background", "cutoff"),
    "select": ("T", "translator", "recolor_color", "recolor_strength", "prompt", "ncc_patch"),
    "harmonize": ("k", "patch", "weighting"),
    "finetune": ("lambda_mae", "lambda_perceptual", "perceptual_kind", "iters", "lr", "seed", "cutoff",
                 "background"),
}


@dataclass
class PipelineConfig:
    """Everything a run needs. Relative paths in a config file resolve against its directory."""

    workdir: str = "work"
    source_ply: str | None = None
    asset_ply: str | None = None
    ref_image: str | None = None
    ref_mask: str | None = None
    cameras: str | None = None          # JSON camera list; default is an orbit of n_views
    mode: str = "add"                   # add | replace
    bbox: str | None = None             # add mode: box JSON
    masks: str | None = None            # replace mode: dir of <view_id>.png
    ground_masks: str | None = None
    asset_up: list[float] | None = None
    vote_fraction: float = 0.5
    n_views: int = 16
    width: int = 64
    height: int = 64
    background: list[float] = field(default_factory=lambda: [0.0, 0.0, 0.0])
    T: int = 2                          # translation/selection rounds
    translator: str = "identity"        # identity | recolor | external
    recolor_color: list[float] = field(default_factory=lambda: [1.0, 0.0, 0.0])
    recolor_strength: float = 1.0
    translator_dir: str | None = None
    prompt: str = ""
    translator_timeout: float = 600.0
    scores_csv: str | None = None       # external similarity scores; default is patch NCC
    ncc_patch: int = 8
    k: int = 4
    patch: int = 8
    weighting: str = "direct"           # direct | inverse
    tokens_dir: str | None = None       # externally produced .tokg grids
    lambda_mae: float = 1.0
    lambda_perceptual: float = 0.2
    perceptual_kind: str = "builtin-dssim"
    iters: int = 10
    lr: float = 0.001                   # Adam learning rate
    seed: int = 0
    cutoff: float = DEFAULT_CUTOFF
    workers: int = 1

    @classmethod
    def from_file(cls, path) -> "PipelineConfig":
        path = Path(path)
        data = json.loads(path.read_text())
        if not isinstance(data, dict):
            raise InputError(f"{path}: config must be a JSON object")
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise InputError(f"{path}: unknown config keys {sorted(unknown)}")
        for key in (*PATH_FIELDS, "workdir"):
            if data.get(key) is not None and not Path(data[key]).is_absolute():
                data[key] = str(path.parent / data[key])
        return cls(**data)

    def with_overrides(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def validate(self, stages=STAGES) -> None:
        required = {"integrate": ("source_ply", "asset_ply")}
        if "select" in stages and self.T > 0:
            required["select"] = ("ref_image",)
        for stage in stages:
            for name in required.get(stage, ()):
                if getattr(self, name) is None:
                    raise InputError(f"stage {stage!r} needs {name!r}")
        for name in PATH_FIELDS:
            value = getattr(self, name)
            if name != "translator_dir" and value is not None and not Path(value).exists():
                raise InputError(f"{name}: {value} does not exist")
        if self.T < 0:
            raise InputError("T must be >= 0")
        if self.mode not in ("add", "replace"):
            raise InputError(f"mode must be 'add' or 'replace', got {self.mode!r}")
        if "integrate" in stages:
            if self.mode == "add" and self.bbox is None:
                raise InputError("add mode needs a bbox file")
            if self.mode == "replace" and self.masks is None:
                raise InputError("replace mode needs a masks directory")
        if self.translator not in ("identity", "recolor", "external"):
            raise InputError(f"unknown translator {self.translator!r}")
        if self.translator == "external" and self.translator_dir is None:
            raise InputError("the external translator needs translator_dir")
        if self.weighting not in ("direct", "inverse"):
            raise InputError(f"weighting must be 'direct' or 'inverse', got {self.weighting!r}")
        if self.k < 1 or self.patch < 1 or self.iters < 0 or self.n_views < 1:
            raise InputError("k, patch and n_views must be positive and iters non-negative")
        LossConfig(self.lambda_mae, self.lambda_perceptual, self.perceptual_kind)

    def stage_config(self, stage: str) -> dict:
        return {name: getattr(self, name) for name in STAGE_FIELDS[stage]}


# --------------------------------------------------------------------------
# hashing and manifests
# --------------------------------------------------------------------------

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_hash(path) -> str:
    """Hash of a file, or of a directory's relative names and file hashes."""
    path = Path(path)
    if path.is_file():
        return file_hash(path)
    h = hashlib.sha256()
    for name, digest in sorted(output_hashes(path).items()):
        h.update(f"{name}\0{digest}\n".encode())
    return h.hexdigest()


def json_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def output_hashes(stage_dir) -> dict[str, str]:
    stage_dir = Path(stage_dir)
    out = {}
    for p in sorted(stage_dir.rglob("*")):
        rel = p.relative_to(stage_dir).as_posix()
        if p.is_file() and rel != MANIFEST:
            out[rel] = file_hash(p)
    return out


def read_manifest(stage_dir) -> dict | None:
    p = Path(stage_dir) / MANIFEST
    if not p.exists():
        return None
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError:
        return None


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@contextmanager
def workdir_lock(workdir) -> Iterator[None]:
    """Hold ``<workdir>/.lock`` for the duration; a second holder fails immediately."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    lock = workdir / LOCK
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise PipelineError(f"{workdir} is locked by another run (remove {lock} if it is stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


# --------------------------------------------------------------------------
# pipeline
# --------------------------------------------------------------------------

class Pipeline:
    """Runs stages of one configuration inside its workdir."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.workdir = Path(config.workdir)

    def stage_dir(self, stage: str) -> Path:
        return self.workdir / stage

    # -- inputs ---------------------------------------------------------------

    def _upstream(self, stage: str) -> str:
        m = read_manifest(self.stage_dir(stage))
        if m is None or m.get("status") != "ok":
            raise PipelineError(f"stage {stage!r} has not completed in {self.workdir}")
        return json_hash(m["outputs"])

    def stage_inputs(self, stage: str) -> dict[str, str]:
        c = self.config
        paths = {
            "integrate": ("source_ply", "asset_ply", "cameras", "bbox", "masks", "ground_masks"),
            "select": ("ref_image", "ref_mask", "scores_csv"),
            "harmonize": ("tokens_dir",),
        }.get(stage, ())
        inputs = {name: tree_hash(getattr(c, name)) for name in paths if getattr(c, name) is not None}
        upstream = {"render": ("integrate",), "select": ("render",), "harmonize": ("render", "select"),
                    "finetune": ("integrate", "harmonize")}.get(stage, ())
        for up in upstream:
            inputs[f"stage:{up}"] = self._upstream(up)
        return inputs

    # -- driver ---------------------------------------------------------------

    def is_current(self, stage: str, inputs: dict, config: dict) -> bool:
        d = self.stage_dir(stage)
        m = read_manifest(d)
        return (m is not None and m.get("status") == "ok" and m.get("inputs") == inputs
                and m.get("config_hash") == json_hash(config) and m.get("outputs") == output_hashes(d))

    def run_stage(self, stage: str) -> str:
        """Run one stage unless it is up to date; returns ``"done"`` or ``"skipped"``."""
        inputs = self.stage_inputs(stage)
        config = self.config.stage_config(stage)
        if self.is_current(stage, inputs, config):
            return "skipped"
        d = self.stage_dir(stage)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        manifest = {"stage": stage, "inputs": inputs, "config": config, "config_hash": json_hash(config)}
        try:
            getattr(self, f"_{stage}")(d)
        except Exception as exc:
            manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}", outputs=output_hashes(d))
            _write_json(d / MANIFEST, manifest)
            if isinstance(exc, PipelineError):
                raise
            raise PipelineError(f"stage {stage!r} failed: {exc}",
                                getattr(exc, "iteration", None)) from exc
        manifest.update(status="ok", outputs=output_hashes(d))
        _write_json(d / MANIFEST, manifest)
        return "done"

    def run(self, stages=STAGES, progress: Callable[[str, str], None] | None = None) -> dict[str, str]:
        self.config.validate(stages)
        result = {}
        with workdir_lock(self.workdir):
            first = min(STAGES.index(s) for s in stages)
            for earlier in STAGES[:first]:
                if not self.is_current(earlier, self.stage_inputs(earlier), self.config.stage_config(earlier)):
                    raise PipelineError(f"stage {earlier!r} is missing or out of date for this config; run it first")
            for stage in stages:
                result[stage] = self.run_stage(stage)
                if progress is not None:
                    progress(stage, result[stage])
        return result

    # -- shared loaders -------------------------------------------------------

    def _scene(self, stage: str):
        return load_ply(self.stage_dir(stage) / "scene.ply", background=self.config.background)

    def _cameras(self) -> list[CameraView]:
        return load_cameras(self.stage_dir("integrate") / "cameras.json")

    def _inserted(self) -> np.ndarray:
        edit = json.loads((self.stage_dir("integrate") / "edit.json").read_text())
        return np.asarray(edit["inserted"], dtype=np.int64)

    def _renders(self, cameras) -> ImageSet:
        d = self.stage_dir("render")
        return ImageSet(ImageEntry(c.id, np.load(d / f"{c.id}.npy"), read_mask(d / f"{c.id}_mask.png"))
                        for c in cameras)

    def _source_cameras(self) -> list[CameraView]:
        c = self.config
        if c.cameras is not None:
            return load_cameras(c.cameras)
        return orbit_cameras(c.n_views, width=c.width, height=c.height)

    def _translator(self):
        c = self.config
        if c.translator == "identity":
            return IdentityTranslator()
        if c.translator == "recolor":
            return RecolorTranslator(tuple(c.recolor_color), c.recolor_strength)
        return DirectoryTranslator(Path(c.translator_dir), prompt=c.prompt, timeout=c.translator_timeout)

    # -- stages ---------------------------------------------------------------

    def _integrate(self, out: Path) -> None:
        c = self.config
        source = load_ply(c.source_ply, background=c.background)
        asset = load_ply(c.asset_ply)
        cameras = self._source_cameras()
        if c.mode == "add":
            mode = AddMode(OrientedBBox.from_dict(json.loads(Path(c.bbox).read_text())))
        else:
            def masks_from(root):
                return [read_mask(Path(root) / f"{cam.id}.png", (cam.width, cam.height)) for cam in cameras]
            ground = masks_from(c.ground_masks) if c.ground_masks is not None else None
            mode = ReplaceMode(cameras, masks_from(c.masks), ground, c.vote_fraction)
        res = integrate(source, asset, mode, c.asset_up)
        save_ply(res.scene, out / "scene.ply")
        save_cameras(cameras, out / "cameras.json")
        _write_json(out / "edit.json", {"inserted": [int(i) for i in res.inserted],
                                        "bbox": res.bbox.to_dict() if res.bbox is not None else None,
                                        "metadata": res.metadata})

    def _render(self, out: Path) -> None:
        c = self.config
        scene = self._scene("integrate")
        inserted = self._inserted()
        for cam in self._cameras():
            view = render(scene, cam, inserted, cutoff=c.cutoff, workers=c.workers)
            write_png(out / f"{cam.id}.png", view.rgb)
            np.save(out / f"{cam.id}.npy", view.rgb)
            write_depth(out / f"{cam.id}.dpth", view.depth)
            write_mask(out / f"{cam.id}_mask.png", view.subset_mask)

    def _select(self, out: Path) -> None:
        c = self.config
        cameras = self._cameras()
        renders = self._renders(cameras)
        translator = self._translator()
        train = ImageSet()
        if c.T > 0:
            size = (cameras[0].width, cameras[0].height)
            ref_mask = read_mask(c.ref_mask, size) if c.ref_mask is not None else None
            ref = ImageEntry("ref", read_png(c.ref_image, size), ref_mask)
            backend = ExternalScores.from_csv(c.scores_csv) if c.scores_csv else NCCSimilarity(c.ncc_patch)
            log: list = []
            train = run_iterations(ref, renders, translator, c.T, backend, log)
            (out / "train").mkdir()
            for e in train:
                write_png(out / "train" / f"{e.id}.png", e.image)
            _write_json(out / "selection.json", log)
        # Final translation with the fully grown training set yields the guidance candidates.
        candidates = translator.translate(c.T + 1, train, renders)
        (out / "candidates").mkdir()
        for cam in cameras:
            img = candidates[cam.id].image
            np.save(out / "candidates" / f"{cam.id}.npy", img)
            write_png(out / "candidates" / f"{cam.id}.png", img)

    def _harmonize(self, out: Path) -> None:
        c = self.config
        cameras = self._cameras()
        renders = self._renders(cameras)
        masks = [renders[cam.id].fg_mask for cam in cameras]
        cands = [np.load(self.stage_dir("select") / "candidates" / f"{cam.id}.npy") for cam in cameras]
        grids = []
        for cam, img, mask in zip(cameras, cands, masks):
            own = tokenize(img, c.patch, mask, cam.id)
            if c.tokens_dir is None:
                grids.append(own)
                continue
            g = read_tokg(Path(c.tokens_dir) / f"{cam.id}.tokg", cam.id)
            if g.norms is None:
                if g.tokens.shape != own.tokens.shape:
                    raise InputError(f"{cam.id}.tokg has no norms sidecar and does not match patch {c.patch}")
                g = dataclasses.replace(g, norms=own.norms)
            grids.append(g)
        keys = select_key_views(cameras, masks, c.k)
        harmonized = replace_tokens(grids, cameras, keys, c.weighting)
        (out / "tokens").mkdir()
        (out / "guidance").mkdir()
        for cam, img, old, new in zip(cameras, cands, grids, harmonized):
            changed = np.any(new.tokens != old.tokens, axis=2)
            guide = detokenize(new, img, changed)
            write_tokg(new, out / "tokens" / f"{cam.id}.tokg")
            np.save(out / "guidance" / f"{cam.id}.npy", guide)
            write_png(out / "guidance" / f"{cam.id}.png", guide)
        _write_json(out / "keys.json", {"key_views": [cameras[i].id for i in keys.indices]})

    def _finetune(self, out: Path) -> None:
        c = self.config
        scene = self._scene("integrate")
        cameras = self._cameras()
        guidance = [np.load(self.stage_dir("harmonize") / "guidance" / f"{cam.id}.npy") for cam in cameras]
        loss = LossConfig(c.lambda_mae, c.lambda_perceptual, c.perceptual_kind)
        try:
            res = finetune(scene, guidance, cameras, self._inserted(), loss, c.iters, lr=c.lr, seed=c.seed,
                           cutoff=c.cutoff, workers=c.workers)
        except DivergedError as exc:
            save_ply(exc.scene, out / "last_good.ply")
            write_loss_log(exc.log, out / "loss_log.csv")
            raise
        save_ply(res.scene, out / "scene.ply")
        write_loss_log(res.log, out / "loss_log.csv")


def run_pipeline(config: PipelineConfig, stages=STAGES, progress=None) -> dict[str, str]:
    return Pipeline(config).run(stages, progress)

