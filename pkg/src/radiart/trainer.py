"""Two-stage training: photometric reconstruction, then text-guided styling.

Stage 2 uses a deferred patch scheme so memory stays bounded at any render
size: (1) render the whole view with no gradient tracking, (2) compute the
style loss and its exact pixel gradient G through encoders only, (3) re-render
disjoint tiles with tracking and backpropagate the surrogate sum(G * tile),
adding the ray-weight regularizer per tile. Because rendering is a pure
per-ray function and G is the true loss gradient at the rendered pixels, the
accumulated parameter gradient equals the one-shot full-graph gradient.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import DivergenceError, ValidationError
from .field import FieldArch, FieldParams, init_params
from .geometry import Camera, MultiViewDataset, generate_rays_grid
from .losses import (StyleTask, loss_reconstruction, loss_weight_reg,
                     sample_negatives, style_pixel_gradient, total_style_loss)
from .optim import AdamState, adam_step
from .renderer import RenderConfig, render_rect_t, render_rays_t, render_view


@dataclass(frozen=True)
class Stage1Config:
    epochs: int = 6
    lr: float = 5e-4
    rays_per_batch: int = 1024
    lr_decay: float = 1.0  # total multiplicative decay over the run (1 = none)
    lr_warmup_steps: int = 0  # linear ramp from 0 guards the fragile first steps
    grad_clip_norm: float = 0.0  # global-norm clip, 0 disables
    density_bias_init: float = 0.5  # warm-start opacity so space is carved, not grown
    holdout: tuple = ()  # frame indices excluded from training, used for PSNR

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("stage-1 epochs must be >= 1")
        if self.lr <= 0:
            raise ValidationError("stage-1 learning rate must be positive")
        if not (0 < self.lr_decay <= 1):
            raise ValidationError("lr_decay must be in (0, 1]")
        if self.lr_warmup_steps < 0 or self.grad_clip_norm < 0:
            raise ValidationError("warmup/clip settings must be >= 0")
        object.__setattr__(self, "holdout", tuple(self.holdout))


@dataclass(frozen=True)
class Stage2Config:
    epochs: int = 4
    lr: float = 1e-3
    views_per_step: int = 1
    tile_size: int = 64  # deferred-backprop tile edge, bounds tape memory
    freeze_density: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise ValidationError("stage-2 epochs must be >= 1")
        if self.lr <= 0:
            raise ValidationError("stage-2 learning rate must be positive")
        if self.tile_size < 1:
            raise ValidationError("tile size must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    render: RenderConfig = field(default_factory=RenderConfig)
    seed: int = 0
    precision: str = "float64"  # float64 | float32

    def __post_init__(self):
        if self.precision not in ("float64", "float32"):
            raise ValidationError(f"unknown precision {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32


@dataclass
class TrainReport:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0
    meta: dict = field(default_factory=dict)

    def write_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as f:
            f.write(json.dumps({"type": "meta", **self.meta,
                                "wall_clock": self.wall_clock}) + "\n")
            for rec in self.steps:
                f.write(json.dumps({"type": "step", **rec}) + "\n")
            for rec in self.epochs:
                f.write(json.dumps({"type": "epoch", **rec}) + "\n")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)


def _with_dataset_bounds(config: TrainConfig, dataset: MultiViewDataset) -> TrainConfig:
    """The dataset's near/far bounds override the render defaults."""
    from dataclasses import replace
    render = replace(config.render, near=dataset.near, far=dataset.far)
    return replace(config, render=render)


def _leaf_params(params: FieldParams, dtype) -> list:
    return [ad.leaf(t.astype(dtype)) for t in params.tensors]


def _sample_batch(rng, config: RenderConfig, n_rays: int) -> np.ndarray:
    k = config.samples_per_ray
    span = config.far - config.near
    if config.strategy == "uniform":
        row = config.near + np.arange(k) / (k - 1) * span
        return np.broadcast_to(row, (n_rays, k)).copy()
    u = rng.random((n_rays, k))
    return config.near + (np.arange(k) + u) / k * span


def train_reconstruction(dataset: MultiViewDataset, arch: FieldArch,
                         config: TrainConfig) -> tuple[FieldParams, TrainReport]:
    """Fit the field to the dataset by Adam on the photometric loss."""
    train_idx = [i for i in range(len(dataset.frames))
                 if i not in config.stage1.holdout]
    if not train_idx:
        raise ValidationError("no training frames left after holdout")
    config = _with_dataset_bounds(config, dataset)
    dtype = config.dtype

    origins, dirs, targets = [], [], []
    for i in train_idx:
        img, cam = dataset.frames[i]
        ys, xs = np.mgrid[0:cam.height, 0:cam.width]
        pix = np.stack([xs.ravel() + 0.0, ys.ravel() + 0.0], axis=-1)
        o, d = generate_rays_grid(cam, pix)
        origins.append(o)
        dirs.append(d)
        targets.append(img.reshape(-1, 3))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    targets = np.concatenate(targets).astype(dtype)

    params = init_params(arch, seed=config.seed)
    # pre-softplus offset on the density head, so the optimizer starts from a
    # hazy volume and carves free space instead of inflating it from nothing
    params.tensors[2 * arch.depth + 1][:] = config.stage1.density_bias_init
    params = FieldParams([t.astype(dtype) for t in params.tensors],
                         role="reconstructed")
    state = AdamState.init(params.tensors, lr=config.stage1.lr)

    n_rays = len(origins)
    batch = min(config.stage1.rays_per_batch, n_rays)
    steps_per_epoch = max(n_rays // batch, 1)
    total_steps = steps_per_epoch * config.stage1.epochs
    decay_per_step = config.stage1.lr_decay ** (1.0 / max(total_steps - 1, 1))
    report = TrainReport(meta={
        "stage": "reconstruction", "frames": len(train_idx),
        "rays": n_rays, "steps_per_epoch": steps_per_epoch,
        "epochs": config.stage1.epochs, "lr": config.stage1.lr,
    })
    t0 = time.monotonic()
    step = 0
    for epoch in range(config.stage1.epochs):
        for _ in range(steps_per_epoch):
            rng = np.random.default_rng([config.seed, 1, step])
            idx = rng.integers(0, n_rays, size=batch)
            dists = _sample_batch(rng, config.render, batch).astype(dtype)
            with ad.Tape() as tape:
                plist = _leaf_params(params, dtype)
                out = render_rays_t(plist, arch, origins[idx], dirs[idx],
                                    dists, dataset.far, config.render.background)
                loss = loss_reconstruction(out["pixel"], targets[idx])
            loss_val = float(loss.data)
            if not np.isfinite(loss_val):
                raise DivergenceError(f"reconstruction loss became {loss_val} "
                                      f"at step {step}")
            grads = ad.backward(tape, loss)
            glist = [grads.wrt(t) for t in plist]
            if config.stage1.grad_clip_norm > 0:
                total = np.sqrt(sum(float(np.sum(g * g)) for g in glist))
                if total > config.stage1.grad_clip_norm:
                    scale = config.stage1.grad_clip_norm / total
                    glist = [g * scale for g in glist]
            state.lr = config.stage1.lr * decay_per_step ** step
            if step < config.stage1.lr_warmup_steps:
                state.lr *= (step + 1) / config.stage1.lr_warmup_steps
            try:
                params.tensors, state = adam_step(state, params.tensors, glist)
            except ad.NumericError as e:
                raise DivergenceError(
                    f"non-finite gradients at step {step}: {e}") from e
            report.steps.append({"step": step, "loss": loss_val})
            step += 1
        epoch_rec = {"epoch": epoch}
        if config.stage1.holdout:
            vals = []
            for i in config.stage1.holdout:
                img, cam = dataset.frames[i]
                est = render_view(params, arch, cam,
                                  config.render.with_seed(config.seed + 7000 + i))
                vals.append(psnr(est, img))
            epoch_rec["psnr_holdout"] = float(np.mean(vals))
        report.epochs.append(epoch_rec)
    report.wall_clock = time.monotonic() - t0
    params.role = "reconstructed"
    return params, report


def sample_patches(width: int, height: int, fraction: float, n: int,
                   seed: int) -> list[tuple[int, int, int, int]]:
    """n square rects of side floor(fraction * min(W, H)), inside bounds."""
    side = int(np.floor(fraction * min(width, height)))
    if side < 4:
        raise ValidationError(
            f"patch side {side} too small (fraction {fraction} of "
            f"{min(width, height)}px); need >= 4")
    rng = np.random.default_rng(seed)
    rects = []
    for _ in range(n):
        x0 = int(rng.integers(0, width - side + 1))
        y0 = int(rng.integers(0, height - side + 1))
        rects.append((x0, y0, side, side))
    return rects


def _tile_grid(width: int, height: int, tile: int):
    for y0 in range(0, height, tile):
        for x0 in range(0, width, tile):
            yield (x0, y0, min(tile, width - x0), min(tile, height - y0))


def _zero_density_grads(glist: list, arch: FieldArch) -> None:
    # trunk + density head hold indices 0 .. 2*depth+1
    for i in range(2 * arch.depth + 2):
        glist[i] = np.zeros_like(glist[i])


def deferred_style_step(params: FieldParams, arch: FieldArch, camera: Camera,
                        task: StyleTask, provider, extractor,
                        config: TrainConfig, i_src: np.ndarray, step_seed: int,
                        negatives=None) -> tuple[list, dict]:
    """Exact style-loss parameter gradient at bounded memory.

    Returns (gradient list matching params.tensors, loss breakdown).
    """
    dtype = config.dtype
    render_cfg = config.render.with_seed(step_seed)
    i_tgt, aux = render_view(params, arch, camera, render_cfg, want_aux=True)

    rects = sample_patches(camera.width, camera.height, task.patch_fraction,
                           task.patches_per_view, seed=step_seed)
    pixel_grad, breakdown = style_pixel_gradient(
        i_tgt, i_src, rects, task, provider, extractor, negatives=negatives)
    reg_val = float(loss_weight_reg(aux["weights"], aux["midpoints"]).data)
    breakdown["reg"] = reg_val
    breakdown["total"] = (breakdown["dir"] + breakdown["con"]
                          + task.lambda_p * breakdown["per"]
                          + task.lambda_r * reg_val)

    grads = [np.zeros_like(t) for t in params.tensors]
    for rect in _tile_grid(camera.width, camera.height,
                           config.stage2.tile_size):
        x0, y0, w, h = rect
        g_tile = pixel_grad[y0:y0 + h, x0:x0 + w].reshape(-1, 3).astype(dtype)
        with ad.Tape() as tape:
            plist = _leaf_params(params, dtype)
            out = render_rect_t(plist, arch, camera, render_cfg, rect)
            surrogate = ad.sum_(ad.mul(out["pixel"], g_tile))
            if task.lambda_r > 0:
                reg_tile = loss_weight_reg(out["weights"], out["midpoints"])
                surrogate = ad.add(surrogate, ad.mul(reg_tile, task.lambda_r))
        tile_grads = ad.backward(tape, surrogate)
        for acc, t in zip(grads, plist):
            acc += tile_grads.wrt(t)
    if config.stage2.freeze_density:
        _zero_density_grads(grads, arch)
    return grads, breakdown


def monolithic_style_grad(params: FieldParams, arch: FieldArch, camera: Camera,
                          task: StyleTask, provider, extractor,
                          config: TrainConfig, i_src: np.ndarray,
                          step_seed: int, negatives=None) -> tuple[list, dict]:
    """One-shot full-graph gradient; the oracle the deferred path must match."""
    dtype = config.dtype
    render_cfg = config.render.with_seed(step_seed)
    rects = sample_patches(camera.width, camera.height, task.patch_fraction,
                           task.patches_per_view, seed=step_seed)
    with ad.Tape() as tape:
        plist = _leaf_params(params, dtype)
        out = render_rect_t(plist, arch, camera, render_cfg,
                            (0, 0, camera.width, camera.height))
        image = ad.reshape(out["pixel"], (camera.height, camera.width, 3))
        total, breakdown = total_style_loss(
            image, i_src, rects, task, provider, extractor,
            out["weights"], out["midpoints"], negatives=negatives)
    grads = ad.backward(tape, total)
    glist = [grads.wrt(t) for t in plist]
    if config.stage2.freeze_density:
        _zero_density_grads(glist, arch)
    return glist, breakdown


def _mean_cosine_to_target(params, arch, cameras, provider, e_target,
                           config) -> float:
    sims = []
    for i, cam in enumerate(cameras):
        img = render_view(params, arch, cam,
                          config.render.with_seed(config.seed + 9000 + i))
        e = provider.embed_image(img)
        sims.append(float(e @ e_target))
    return float(np.mean(sims))


def stylize(f_rec: FieldParams, arch: FieldArch, dataset: MultiViewDataset,
            task: StyleTask, provider, extractor,
            config: TrainConfig) -> tuple[FieldParams, TrainReport]:
    """Fine-tune a copy of the reconstructed field toward the target prompt.

    Source renders come from the frozen input checkpoint, one per pose,
    cached up front; the input itself is never mutated. One epoch is one pass
    over all training poses, one view per step.
    """
    if f_rec.role != "reconstructed":
        raise ValidationError(
            f"stylization needs a reconstructed checkpoint, got {f_rec.role!r}")
    config = _with_dataset_bounds(config, dataset)
    dtype = config.dtype
    params = FieldParams([t.astype(dtype) for t in f_rec.tensors],
                         role="stylized")
    cameras = [cam for _, cam in dataset.frames]
    src_renders = [render_view(f_rec, arch, cam,
                               config.render.with_seed(config.seed + 5000 + i))
                   for i, cam in enumerate(cameras)]

    e_target = provider.embed_text(task.t_tgt)
    state = AdamState.init(params.tensors, lr=config.stage2.lr)
    report = TrainReport(meta={
        "stage": "stylization", "poses": len(cameras),
        "epochs": config.stage2.epochs, "lr": config.stage2.lr,
        "provider": provider.name, "t_tgt": task.t_tgt, "t_src": task.t_src,
    })
    report.epochs.append({
        "epoch": -1,
        "cosine_to_target": _mean_cosine_to_target(
            params, arch, cameras, provider, e_target, config),
    })

    t0 = time.monotonic()
    step = 0
    for epoch in range(config.stage2.epochs):
        for pose in range(len(cameras)):
            step_seed = int(np.random.default_rng(
                [config.seed, 2, step]).integers(2 ** 31))
            negatives = sample_negatives(task, seed=step_seed) or None
            grads, breakdown = deferred_style_step(
                params, arch, cameras[pose], task, provider, extractor,
                config, src_renders[pose], step_seed, negatives=negatives)
            if not np.isfinite(breakdown["total"]):
                raise DivergenceError(
                    f"style loss became {breakdown['total']} at step {step}")
            try:
                params.tensors, state = adam_step(state, params.tensors, grads)
            except ad.NumericError as e:
                raise DivergenceError(
                    f"non-finite style gradients at step {step}: {e}") from e
            report.steps.append({"step": step, "pose": pose, **{
                k: v for k, v in breakdown.items() if k != "dir_degenerate"}})
            step += 1
        report.epochs.append({
            "epoch": epoch,
            "cosine_to_target": _mean_cosine_to_target(
                params, arch, cameras, provider, e_target, config),
        })
    report.wall_clock = time.monotonic() - t0
    params.role = "stylized"
    return params, report
