"""Guidance-supervised fine-tuning of splat appearance.

Per view the loss is ``lambda_mae * mean|r - g| + lambda_perceptual * mean(1 - SSIM(r, g))``
where SSIM uses 11x11 Gaussian windows (sigma 1.5) with zero padding. Only
colors and opacity logits of the editable splats are updated, one Adam
step per rendered view.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .camera import CameraView
from .errors import DivergedError, InputError, NumericError
from .render import DEFAULT_CUTOFF, RenderedView, backward, rasterize
from .splats import SplatScene

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5


def gaussian_kernel(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


_KERNEL = gaussian_kernel()


def blur(x: np.ndarray, kernel: np.ndarray = _KERNEL) -> np.ndarray:
    """Separable 'same' filtering of the first two axes with zero padding.

    With a symmetric kernel this linear map is self-adjoint, which the SSIM
    gradient relies on.
    """
    r = len(kernel) // 2
    h, w = x.shape[:2]
    pad = np.zeros((h + 2 * r,) + x.shape[1:])
    pad[r:r + h] = x
    y = sum(kernel[i] * pad[i:i + h] for i in range(len(kernel)))
    pad = np.zeros((h, w + 2 * r) + x.shape[2:])
    pad[:, r:r + w] = y
    return sum(kernel[i] * pad[:, i:i + w] for i in range(len(kernel)))


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    mx, my = blur(x), blur(y)
    sxx = blur(x * x) - mx * mx
    syy = blur(y * y) - my * my
    sxy = blur(x * y) - mx * my
    return ((2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2))


def dssim_and_grad(x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """``mean(1 - SSIM(x, y))`` and its gradient with respect to ``x``."""
    if np.array_equal(x, y):
        # Global minimum. Return an exact zero: Adam rescales even roundoff-sized
        # gradients into lr-sized steps, which would break the fixed point.
        return 0.0, np.zeros_like(x, dtype=np.float64)
    n = x.size
    mx, my = blur(x), blur(y)
    exx, eyy, exy = blur(x * x), blur(y * y), blur(x * y)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (exy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (exx - mx * mx) + (eyy - my * my) + SSIM_C2
    s = a1 * a2 / (b1 * b2)
    # Partials of s w.r.t. the filtered moments mx, E[x^2], E[xy].
    d_mx = 2 * my * (a2 - a1) / (b1 * b2) - s * 2 * mx * (1.0 / b1 - 1.0 / b2)
    d_exx = -s / b2
    d_exy = 2 * a1 / (b1 * b2)
    up = -1.0 / n
    grad = blur(up * d_mx) + 2 * x * blur(up * d_exx) + y * blur(up * d_exy)
    return float(np.mean(1.0 - s)), grad


@dataclass(frozen=True)
class LossConfig:
    lambda_mae: float = 1.0
    lambda_perceptual: float = 0.2
    perceptual_kind: Literal["builtin-dssim", "none"] = "builtin-dssim"

    def __post_init__(self):
        if self.lambda_mae < 0 or self.lambda_perceptual < 0:
            raise InputError("loss weights must be non-negative")
        if self.perceptual_kind not in ("builtin-dssim", "none"):
            raise InputError(f"unknown perceptual loss {self.perceptual_kind!r}")
        uses_perc = self.perceptual_kind != "none" and self.lambda_perceptual > 0
        if self.lambda_mae == 0 and not uses_perc:
            raise InputError("at least one loss term must be active")


class LossTerms(NamedTuple):
    total: float
    mae: float
    perceptual: float
    grad: np.ndarray


def loss_terms(render, guidance, config: LossConfig = LossConfig()) -> LossTerms:
    r = render.rgb if isinstance(render, RenderedView) else np.asarray(render, dtype=np.float64)
    g = np.asarray(guidance, dtype=np.float64)
    if r.shape != g.shape:
        raise InputError(f"render {r.shape} and guidance {g.shape} differ in size")
    diff = r - g
    mae = float(np.mean(np.abs(diff)))
    grad = config.lambda_mae * np.sign(diff) / diff.size
    perc = 0.0
    if config.perceptual_kind == "builtin-dssim" and config.lambda_perceptual > 0:
        perc, g_perc = dssim_and_grad(r, g)
        grad = grad + config.lambda_perceptual * g_perc
    total = config.lambda_mae * mae + config.lambda_perceptual * perc
    return LossTerms(total, mae, perc, grad)


def loss_and_grad(render, guidance, config: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    t = loss_terms(render, guidance, config)
    return t.total, t.grad


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, params, grads) -> np.ndarray:
    """One bias-corrected Adam update; returns new params and advances ``state``.

    Raises:
        NumericError: ``grads`` has NaN/Inf (``state`` is left untouched).
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape:
        raise InputError(f"params {p.shape} and grads {g.shape} differ in shape")
    if not np.all(np.isfinite(g)):
        raise NumericError("non-finite gradient; Adam step rejected")
    if state.m is None:
        state.m = np.zeros_like(p)
        state.v = np.zeros_like(p)
    elif state.m.shape != p.shape:
        raise InputError(f"Adam state shape {state.m.shape} does not match params {p.shape}")
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass(frozen=True)
class LossRecord:
    epoch: int
    view_id: str
    loss: float
    mae: float
    perceptual: float


@dataclass
class FinetuneResult:
    scene: SplatScene
    log: list[LossRecord] = field(default_factory=list)

    def epoch_means(self) -> list[float]:
        epochs = sorted({r.epoch for r in self.log})
        return [float(np.mean([r.loss for r in self.log if r.epoch == e])) for e in epochs]


def finetune(scene: SplatScene, guidance: Sequence[np.ndarray], views: Sequence[CameraView], editable,
             config: LossConfig = LossConfig(), iters: int = 10, *, lr: float = 1e-3, seed: int = 0,
             cutoff: float = DEFAULT_CUTOFF, workers: int = 1) -> FinetuneResult:
    """Fit editable splat colors and opacities to per-view guidance images.

    Runs ``iters`` epochs; each epoch visits the views in a seeded random
    order and takes one Adam step per view. Colors are clamped to [0, 1]
    after every step.

    Raises:
        DivergedError: a loss became non-finite; carries the last good scene.
    """
    if len(guidance) != len(views):
        raise InputError(f"got {len(guidance)} guidance images for {len(views)} views")
    for g, v in zip(guidance, views):
        if np.shape(g) != (v.height, v.width, 3):
            raise InputError(f"guidance for {v.id!r} has shape {np.shape(g)}, expected {(v.height, v.width, 3)}")
    idx = np.unique(np.asarray(list(editable), dtype=np.int64))
    if len(idx) and (idx[0] < 0 or idx[-1] >= len(scene)):
        raise InputError("editable indices out of range")
    rng = np.random.default_rng(seed)
    state = AdamState(lr=lr)
    log: list[LossRecord] = []
    k = len(idx)
    for epoch in range(1, iters + 1):
        for vi in rng.permutation(len(views)):
            view, ctx = rasterize(scene, views[vi], cutoff=cutoff, workers=workers, keep_context=k > 0)
            terms = loss_terms(view, guidance[vi], config)
            if not np.isfinite(terms.total):
                raise DivergedError(f"non-finite loss at epoch {epoch}, view {views[vi].id!r}", scene, log)
            log.append(LossRecord(epoch, views[vi].id, terms.total, terms.mae, terms.perceptual))
            if k == 0:
                continue
            grads = backward(ctx, terms.grad, workers=workers)
            flat = np.concatenate([scene.colors[idx].ravel(), scene.opacity_logits[idx]])
            gflat = np.concatenate([grads.color[idx].ravel(), grads.opacity_logit[idx]])
            try:
                new = adam_step(state, flat, gflat)
            except NumericError as exc:
                raise DivergedError(str(exc), scene, log) from exc
            colors = scene.colors.copy()
            colors[idx] = np.clip(new[: 3 * k].reshape(k, 3), 0.0, 1.0)
            opac = scene.opacity_logits.copy()
            opac[idx] = new[3 * k:]
            scene = scene.replace(colors=colors, opacity_logits=opac)
    return FinetuneResult(scene, log)


def write_loss_log(log: Sequence[LossRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "view_id", "loss", "mae", "perceptual"])
        for r in log:
            w.writerow([r.epoch, r.view_id, repr(r.loss), repr(r.mae), repr(r.perceptual)])
