"""Ray sampling and volumetric compositing.

Per-sample segment transmittance is omega_k = exp(-sigma_k * (d_{k+1} - d_k)),
accumulated transmittance T_k is the product of earlier omegas, and the
contribution of sample k to the pixel is w_k = T_k * (1 - omega_k). The last
segment is closed with the far bound, and leftover transmittance T_{K+1}
blends in a constant background.

Rendering is a pure function per ray. Stratified jitter is drawn once per
(seed, H, W, K) for the whole image and sliced per rect, so a patch render is
bit-identical to the same region of the full render.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .field import FieldArch, FieldParams, field_eval_batch
from .geometry import Camera, generate_rays_grid


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 192
    strategy: str = "stratified"  # stratified | uniform
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 1.0
    far: float = 4.2
    jitter_seed: int = 0
    chunk: int = 8192

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise ValidationError("need at least 2 samples per ray")
        if self.strategy not in ("stratified", "uniform"):
            raise ValidationError(f"unknown sampling strategy {self.strategy!r}")
        if not (0 < self.near < self.far):
            raise ValidationError("need 0 < near < far")

    def with_seed(self, seed: int) -> "RenderConfig":
        return replace(self, jitter_seed=seed)


@dataclass
class CompositeResult:
    """Per-ray compositing diagnostics. trans has K+1 entries (residual last)."""

    color: np.ndarray   # (3,) convex sub-combination before background blend
    omega: np.ndarray   # (K,) segment transmittance factors
    trans: np.ndarray   # (K+1,) accumulated transmittance, trans[0] = 1
    weights: np.ndarray  # (K,) w_k = T_k (1 - omega_k)


def sample_ray(ray, near: float, far: float, k: int, strategy: str,
               seed: int) -> np.ndarray:
    """Sample distances along one ray; stratified draws one point per bin."""
    if not (near < far):
        raise ValidationError("need near < far")
    if k < 2:
        raise ValidationError("need K >= 2")
    if strategy == "uniform":
        return near + np.arange(k) / (k - 1) * (far - near)
    if strategy == "stratified":
        u = np.random.default_rng(seed).random(k)
        return near + (np.arange(k) + u) / k * (far - near)
    raise ValidationError(f"unknown sampling strategy {strategy!r}")


def sample_grid(config: RenderConfig, height: int, width: int) -> np.ndarray:
    """(H, W, K) strictly increasing distances; one jitter table per image."""
    k = config.samples_per_ray
    span = config.far - config.near
    if config.strategy == "uniform":
        row = config.near + np.arange(k) / (k - 1) * span
        return np.broadcast_to(row, (height, width, k)).copy()
    u = np.random.default_rng(config.jitter_seed).random((height, width, k))
    return config.near + (np.arange(k) + u) / k * span


def _composite_t(sigmas: Tensor, colors: Tensor, boundaries: np.ndarray,
                 background) -> dict:
    """Tape-aware compositing. sigmas (R, K); colors (R, K, 3); boundaries (R, K+1)."""
    r, k = sigmas.data.shape
    deltas = boundaries[:, 1:] - boundaries[:, :-1]
    # zero-width segments are legal (omega=1, zero weight); only reversals are not
    if np.any(deltas < 0):
        raise ValidationError("sample boundaries must be non-decreasing")
    tau = ad.mul(sigmas, deltas)
    omega = ad.exp(ad.neg(tau))
    # T_k = exp(-sum_{i<k} tau_i); index K is the residual after the last sample
    accum = ad.concat([ad.constant(np.zeros((r, 1), dtype=tau.data.dtype)),
                       ad.cumsum(tau, axis=1)], axis=1)
    trans = ad.exp(ad.neg(accum))
    t_k = trans[:, :k]
    weights = ad.mul(t_k, ad.sub(1.0, omega))
    color = ad.sum_(ad.mul(ad.reshape(weights, (r, k, 1)), colors), axis=1)
    bg = np.asarray(background, dtype=tau.data.dtype)
    pixel = ad.add(color, ad.mul(trans[:, k:], bg))
    return {"color": color, "pixel": pixel, "omega": omega,
            "trans": trans, "weights": weights}


def composite(sigmas: np.ndarray, colors: np.ndarray, distances: np.ndarray,
              background) -> tuple[CompositeResult, np.ndarray]:
    """Single-ray compositing from K densities/colors and K+1 boundaries."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas < 0):
        raise ValidationError("densities must be non-negative")
    colors = np.asarray(colors, dtype=np.float64)
    distances = np.asarray(distances, dtype=np.float64)
    if distances.shape != (sigmas.shape[0] + 1,):
        raise ValidationError("need K+1 boundary distances")
    out = _composite_t(ad.constant(sigmas[None, :]),
                       ad.constant(colors[None, :, :]),
                       distances[None, :], background)
    result = CompositeResult(color=out["color"].data[0],
                             omega=out["omega"].data[0],
                             trans=out["trans"].data[0],
                             weights=out["weights"].data[0])
    return result, out["pixel"].data[0]


def render_rays_fn(field_fn, origins: np.ndarray, dirs: np.ndarray,
                   dists: np.ndarray, far: float, background) -> dict:
    """Render a batch of rays through any (points, dirs) -> (sigma, color) field.

    field_fn receives flattened (R*K, 3) sample points and matching directions
    and returns a (R*K,) density Tensor and (R*K, 3) color Tensor. Returns the
    compositing dict plus sample midpoints (constant) for regularization terms.
    """
    r, k = dists.shape
    pts = origins[:, None, :] + dirs[:, None, :] * dists[:, :, None]
    dirs_flat = np.repeat(dirs, k, axis=0)
    sigma, color = field_fn(pts.reshape(-1, 3), dirs_flat)
    sigma = ad.reshape(sigma, (r, k))
    color = ad.reshape(color, (r, k, 3))
    boundaries = np.concatenate([dists, np.full((r, 1), far)], axis=1)
    out = _composite_t(sigma, color, boundaries, background)
    out["midpoints"] = 0.5 * (boundaries[:, :-1] + boundaries[:, 1:])
    return out


def mlp_field_fn(params: list[Tensor], arch: FieldArch):
    dtype = params[0].data.dtype

    def field_fn(pts: np.ndarray, dirs: np.ndarray):
        return field_eval_batch(params, arch,
                                ad.constant(pts.astype(dtype)),
                                ad.constant(dirs.astype(dtype)))

    return field_fn


def render_rays_t(params: list[Tensor], arch: FieldArch, origins: np.ndarray,
                  dirs: np.ndarray, dists: np.ndarray, far: float,
                  background) -> dict:
    """Render a batch of rays; differentiable w.r.t. params on an active tape."""
    return render_rays_fn(mlp_field_fn(params, arch), origins, dirs, dists,
                          far, background)


def _params_t(params: FieldParams) -> list[Tensor]:
    return [ad.constant(t) for t in params.tensors]


def _rect_pixels(rect: tuple[int, int, int, int]) -> np.ndarray:
    x0, y0, w, h = rect
    ys, xs = np.mgrid[y0:y0 + h, x0:x0 + w]
    return np.stack([xs.ravel() + 0.0, ys.ravel() + 0.0], axis=-1)


def render_rect_t(params: list[Tensor], arch: FieldArch, camera: Camera,
                  config: RenderConfig, rect: tuple[int, int, int, int]) -> dict:
    """Differentiable render of a pixel rectangle, row-major ray order."""
    x0, y0, w, h = rect
    if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 \
            or x0 + w > camera.width or y0 + h > camera.height:
        raise ValidationError(f"rect {rect} outside {camera.width}x{camera.height}")
    grid = sample_grid(config, camera.height, camera.width)
    dists = grid[y0:y0 + h, x0:x0 + w].reshape(w * h, config.samples_per_ray)
    origins, dirs = generate_rays_grid(camera, _rect_pixels(rect))
    return render_rays_t(params, arch, origins, dirs, dists,
                         config.far, config.background)


def render_view(params: FieldParams, arch: FieldArch, camera: Camera,
                config: RenderConfig, want_aux: bool = False):
    """Full-image render (no gradients). Returns (H, W, 3) in [0, 1].

    With want_aux, also returns per-pixel weights, midpoints, and residual
    transmittance, flattened row-major.
    """
    params.validate(arch)
    plist = _params_t(params)
    n = camera.width * camera.height
    pixel = np.empty((n, 3))
    aux_w = np.empty((n, config.samples_per_ray)) if want_aux else None
    aux_m = np.empty((n, config.samples_per_ray)) if want_aux else None
    aux_t = np.empty(n) if want_aux else None
    rows_per_chunk = max(config.chunk // camera.width, 1)
    for y0 in range(0, camera.height, rows_per_chunk):
        h = min(rows_per_chunk, camera.height - y0)
        out = render_rect_t(plist, arch, camera, config,
                            (0, y0, camera.width, h))
        lo = y0 * camera.width
        hi = lo + h * camera.width
        pixel[lo:hi] = out["pixel"].data
        if want_aux:
            aux_w[lo:hi] = out["weights"].data
            aux_m[lo:hi] = out["midpoints"]
            aux_t[lo:hi] = out["trans"].data[:, -1]
    image = pixel.reshape(camera.height, camera.width, 3)
    if want_aux:
        return image, {"weights": aux_w, "midpoints": aux_m, "residual": aux_t}
    return image


def render_patch(params: FieldParams, arch: FieldArch, camera: Camera,
                 config: RenderConfig, rect: tuple[int, int, int, int]) -> np.ndarray:
    """Patch render; bit-identical to the same rect of render_view."""
    params.validate(arch)
    out = render_rect_t(_params_t(params), arch, camera, config, rect)
    x0, y0, w, h = rect
    return out["pixel"].data.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# float image output
# ---------------------------------------------------------------------------

def write_pfm(path: str | Path, image: np.ndarray) -> None:
    """Little-endian 32-bit float PFM, rows bottom-to-top per the format."""
    image = np.asarray(image, dtype="<f4")
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.flipud(image).tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"PF":
            raise ValidationError("not a color PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        data = np.frombuffer(f.read(), dtype="<f4" if scale < 0 else ">f4")
    return np.flipud(data.reshape(h, w, 3)).astype(np.float64)
