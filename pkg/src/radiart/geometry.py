"""Cameras, rays, multi-view dataset I/O, and analytic oracle scenes.

Convention: right-handed, camera looks along -z in its own frame (the
OpenGL/NeRF convention). Pixel (px, py) maps to the camera-space direction
((px-cx)/fx, -(py-cy)/fy, -1) before rotation and normalization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from .errors import DatasetFormatError, ValidationError

_ROT_TOL = 1e-6


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray  # 4x4 rigid transform

    def __post_init__(self):
        c2w = np.asarray(self.camera_to_world, dtype=np.float64)
        if c2w.shape != (4, 4):
            raise ValidationError("camera_to_world must be 4x4")
        object.__setattr__(self, "camera_to_world", c2w)
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError("principal point outside image")
        r = c2w[:3, :3]
        if np.max(np.abs(r.T @ r - np.eye(3))) >= _ROT_TOL:
            raise ValidationError("rotation block is not orthonormal")
        if np.max(np.abs(c2w[3] - np.array([0.0, 0.0, 0.0, 1.0]))) > 0:
            raise ValidationError("last row of camera_to_world must be [0,0,0,1]")

    @property
    def position(self) -> np.ndarray:
        return self.camera_to_world[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3].copy()


def generate_ray(camera: Camera, px: float, py: float) -> tuple[np.ndarray, np.ndarray]:
    """World-space (origin, unit direction) for a pixel coordinate."""
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise ValidationError(f"pixel ({px}, {py}) outside image bounds")
    d_cam = np.array([(px - camera.cx) / camera.fx,
                      -(py - camera.cy) / camera.fy,
                      -1.0])
    d_world = camera.rotation @ d_cam
    return camera.position, d_world / np.linalg.norm(d_world)


def generate_rays_grid(camera: Camera, pixels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized rays for an (N, 2) array of (px, py) pixel coordinates."""
    px = pixels[:, 0]
    py = pixels[:, 1]
    d_cam = np.stack([(px - camera.cx) / camera.fx,
                      -(py - camera.cy) / camera.fy,
                      -np.ones_like(px)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    d_world /= np.linalg.norm(d_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.position, d_world.shape).copy()
    return origins, d_world


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """camera_to_world for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    true_up = np.cross(right, forward)
    c2w = np.eye(4)
    c2w[:3, 0] = right
    c2w[:3, 1] = true_up
    c2w[:3, 2] = -forward  # camera looks down -z
    c2w[:3, 3] = eye
    return c2w


@dataclass
class MultiViewDataset:
    frames: list[tuple[np.ndarray, Camera]]
    near: float
    far: float

    def __post_init__(self):
        if not (0 < self.near < self.far):
            raise ValidationError("need 0 < near < far")
        sizes = {(cam.width, cam.height) for _, cam in self.frames}
        if len(sizes) > 1:
            raise ValidationError(f"mixed image sizes in dataset: {sorted(sizes)}")
        for img, cam in self.frames:
            if img.shape != (cam.height, cam.width, 3):
                raise ValidationError(
                    f"image shape {img.shape} does not match camera "
                    f"{cam.width}x{cam.height}")


# ---------------------------------------------------------------------------
# dataset directory format: cameras.json + referenced PNGs
# ---------------------------------------------------------------------------

def save_png(path: str | Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_png(path: str | Path) -> np.ndarray:
    img = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return img / 255.0


def write_dataset(path: str | Path, dataset: MultiViewDataset) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    frames = []
    w, h = dataset.frames[0][1].width, dataset.frames[0][1].height
    for i, (img, cam) in enumerate(dataset.frames):
        name = f"frame_{i:04d}.png"
        save_png(path / name, img)
        frames.append({
            "file": name,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "c2w": [float(v) for v in cam.camera_to_world.ravel()],
        })
    manifest = {"width": w, "height": h,
                "near": dataset.near, "far": dataset.far,
                "frames": frames}
    (path / "cameras.json").write_text(json.dumps(manifest, indent=1))


def load_dataset(path: str | Path) -> MultiViewDataset:
    path = Path(path)
    manifest_path = path / "cameras.json"
    if not manifest_path.is_file():
        raise DatasetFormatError(f"no cameras.json under {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        width = int(manifest["width"])
        height = int(manifest["height"])
        near = float(manifest["near"])
        far = float(manifest["far"])
        frame_specs = manifest["frames"]
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetFormatError(f"malformed cameras.json: {e}") from e
    frames = []
    for spec in frame_specs:
        c2w = np.asarray(spec["c2w"], dtype=np.float64)
        if c2w.size != 16:
            raise ValidationError("c2w must hold 16 row-major values")
        cam = Camera(fx=float(spec["fx"]), fy=float(spec["fy"]),
                     cx=float(spec["cx"]), cy=float(spec["cy"]),
                     width=width, height=height,
                     camera_to_world=c2w.reshape(4, 4))
        img = load_png(path / spec["file"])
        if img.shape != (height, width, 3):
            raise ValidationError(
                f"{spec['file']} is {img.shape[1]}x{img.shape[0]}, "
                f"manifest says {width}x{height}")
        frames.append((img, cam))
    return MultiViewDataset(frames=frames, near=near, far=far)


# ---------------------------------------------------------------------------
# analytic scenes: closed-form density/color used as rendering oracles
# ---------------------------------------------------------------------------

@dataclass
class SyntheticScene:
    """Closed-form volume. sigma: (N,3)->(N,); color: ((N,3),(N,3))->(N,3)."""

    sigma: Callable[[np.ndarray], np.ndarray]
    color: Callable[[np.ndarray, np.ndarray], np.ndarray]
    near: float
    far: float
    bbox: tuple[float, float] = (-1.5, 1.5)


def empty_scene(near: float = 0.5, far: float = 3.0) -> SyntheticScene:
    return SyntheticScene(
        sigma=lambda x: np.zeros(len(x)),
        color=lambda x, d: np.zeros((len(x), 3)),
        near=near, far=far)


def slab_scene(z_lo: float, z_hi: float, density: float,
               color=(1.0, 0.0, 0.0), near: float = 0.5,
               far: float = 4.0) -> SyntheticScene:
    """Homogeneous slab between two z planes; transmittance has a closed form."""
    c = np.asarray(color, dtype=np.float64)

    def sigma(x):
        return np.where((x[:, 2] >= z_lo) & (x[:, 2] <= z_hi), density, 0.0)

    return SyntheticScene(sigma=sigma,
                          color=lambda x, d: np.broadcast_to(c, (len(x), 3)).copy(),
                          near=near, far=far)


def soft_sphere_scene(radius: float = 0.6, density: float = 8.0,
                      sharpness: float = 14.0, near: float = 1.0,
                      far: float = 4.2) -> SyntheticScene:
    """Sphere with a smooth density falloff and position-dependent color.

    Smoothness makes it an easy reconstruction target; the color ramp over
    position gives the field something view-consistent to learn.
    """

    def sigma(x):
        r = np.linalg.norm(x, axis=-1)
        return density / (1.0 + np.exp(sharpness * (r - radius)))

    def color(x, d):
        t = np.clip((x + radius) / (2 * radius), 0.0, 1.0)
        return 0.15 + 0.7 * t

    return SyntheticScene(sigma=sigma, color=color, near=near, far=far)


def solid_sphere_scene(radius: float = 0.6, density: float = 25.0,
                       color=(0.9, 0.55, 0.2), near: float = 1.0,
                       far: float = 4.2) -> SyntheticScene:
    c = np.asarray(color, dtype=np.float64)

    def sigma(x):
        return np.where(np.linalg.norm(x, axis=-1) <= radius, density, 0.0)

    return SyntheticScene(sigma=sigma,
                          color=lambda x, d: np.broadcast_to(c, (len(x), 3)).copy(),
                          near=near, far=far)


def render_scene_analytic(scene: SyntheticScene, camera: Camera, step: float,
                          background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Dense midpoint quadrature of the volume rendering integral.

    Serves as the convergence oracle for the trainable renderer; accuracy is
    O(step) for discontinuous densities and better for smooth ones.
    """
    if step <= 0:
        raise ValidationError("quadrature step must be positive")
    bg = np.asarray(background, dtype=np.float64)
    n_steps = max(int(np.ceil((scene.far - scene.near) / step)), 1)
    ts = scene.near + (np.arange(n_steps) + 0.5) * (scene.far - scene.near) / n_steps
    dt = (scene.far - scene.near) / n_steps

    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    pixels = np.stack([xs.ravel() + 0.0, ys.ravel() + 0.0], axis=-1)
    origins, dirs = generate_rays_grid(camera, pixels)

    image = np.empty((camera.height * camera.width, 3))
    chunk = 4096
    for lo in range(0, len(pixels), chunk):
        o = origins[lo:lo + chunk]
        d = dirs[lo:lo + chunk]
        pts = o[:, None, :] + d[:, None, :] * ts[None, :, None]
        flat = pts.reshape(-1, 3)
        dirs_flat = np.repeat(d, len(ts), axis=0)
        sig = scene.sigma(flat).reshape(len(o), len(ts))
        col = scene.color(flat, dirs_flat).reshape(len(o), len(ts), 3)
        tau = sig * dt
        trans = np.exp(-np.concatenate(
            [np.zeros((len(o), 1)), np.cumsum(tau, axis=1)], axis=1))
        weights = trans[:, :-1] * (1.0 - np.exp(-tau))
        image[lo:lo + chunk] = (weights[..., None] * col).sum(axis=1) \
            + trans[:, -1:] * bg
    return image.reshape(camera.height, camera.width, 3)


def ring_cameras(n: int, radius: float = 2.5, height: float = 0.6,
                 width: int = 40, height_px: int = 40,
                 focal: float = 45.0) -> list[Camera]:
    """Cameras on a ring around the origin, all looking at the center."""
    cams = []
    for i in range(n):
        angle = 2.0 * np.pi * i / n
        eye = np.array([radius * np.cos(angle), height, radius * np.sin(angle)])
        cams.append(Camera(fx=focal, fy=focal,
                           cx=width / 2.0, cy=height_px / 2.0,
                           width=width, height=height_px,
                           camera_to_world=look_at(eye, (0.0, 0.0, 0.0))))
    return cams


def synthetic_dataset(scene: SyntheticScene, cameras: list[Camera],
                      step: float = 0.004,
                      background=(0.0, 0.0, 0.0)) -> MultiViewDataset:
    frames = [(render_scene_analytic(scene, cam, step, background), cam)
              for cam in cameras]
    return MultiViewDataset(frames=frames, near=scene.near, far=scene.far)
