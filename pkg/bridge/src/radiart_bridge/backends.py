"""Encoder backends.

``TinyTorchBackend`` is a fixed-seed convolutional encoder pair used for
tests and demos: real torch autograd, no downloaded weights. ``ClipBackend``
wraps a pretrained contrastive text-image model when transformers weights are
available locally.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn as nn


def _token_generator(token: str, salt: int) -> torch.Generator:
    digest = hashlib.blake2b(f"{salt}:{token}".encode(), digest_size=8).digest()
    gen = torch.Generator()
    gen.manual_seed(int.from_bytes(digest, "little") % (2 ** 63))
    return gen


class TinyTorchBackend:
    """Deterministic random-weight encoders with exact autograd VJPs."""

    variant = "tiny-torch"

    def __init__(self, seed: int = 0, dim: int = 32, image_size: int = 32):
        self.seed = seed
        self.dim = dim
        self.image_size = image_size
        gen = torch.Generator().manual_seed(seed)

        def init(shape, fan_in):
            return (torch.randn(shape, generator=gen) / fan_in ** 0.5)

        self.conv1 = nn.Parameter(init((16, 3, 3, 3), 27), requires_grad=False)
        self.conv2 = nn.Parameter(init((32, 16, 3, 3), 144), requires_grad=False)
        flat = 32 * (image_size // 4 - 1) ** 2
        self.head = nn.Parameter(init((dim, flat), flat), requires_grad=False)
        # fixed offset keeps the pre-normalization vector away from zero
        # for constant images
        self.head_bias = nn.Parameter(0.1 * torch.randn(dim, generator=gen),
                                      requires_grad=False)

    def info(self) -> dict:
        return {"dim": self.dim, "image_size": self.image_size,
                "feature_layers": 2, "variant": self.variant}

    def _image_tensor(self, image: np.ndarray) -> torch.Tensor:
        t = torch.from_numpy(np.asarray(image, dtype=np.float32))
        if t.ndim != 3 or t.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got {tuple(t.shape)}")
        return t.permute(2, 0, 1).unsqueeze(0)  # (1, 3, H, W)

    def _trunk(self, x: torch.Tensor) -> list[torch.Tensor]:
        x = nn.functional.adaptive_avg_pool2d(x, self.image_size)
        f1 = torch.tanh(nn.functional.conv2d(x, self.conv1, stride=2))
        f2 = torch.tanh(nn.functional.conv2d(f1, self.conv2, stride=2))
        return [f1, f2]

    def _embed_from_trunk(self, feats: list[torch.Tensor]) -> torch.Tensor:
        flat = feats[-1].reshape(-1)
        e = torch.tanh(self.head @ flat + self.head_bias)
        return e / torch.linalg.norm(e)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            e = self._embed_from_trunk(self._trunk(self._image_tensor(image)))
        return e.numpy()

    def embed_text(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise ValueError("cannot embed empty text")
        acc = torch.zeros(self.dim)
        for token in tokens:
            acc += torch.randn(self.dim, generator=_token_generator(token, self.seed))
        acc /= len(tokens)
        return (acc / torch.linalg.norm(acc)).numpy()

    def image_vjp(self, image: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        x = self._image_tensor(image).requires_grad_(True)
        e = self._embed_from_trunk(self._trunk(x))
        scalar = (e * torch.from_numpy(np.asarray(upstream, dtype=np.float32))).sum()
        (grad,) = torch.autograd.grad(scalar, x)
        return grad[0].permute(1, 2, 0).numpy()

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        with torch.no_grad():
            feats = self._trunk(self._image_tensor(image))
        return [f[0].permute(1, 2, 0).numpy() for f in feats]

    def features_vjp(self, image: np.ndarray,
                     upstreams: list[np.ndarray]) -> np.ndarray:
        x = self._image_tensor(image).requires_grad_(True)
        feats = self._trunk(x)
        scalar = sum(
            (f[0].permute(1, 2, 0)
             * torch.from_numpy(np.asarray(u, dtype=np.float32))).sum()
            for f, u in zip(feats, upstreams))
        (grad,) = torch.autograd.grad(scalar, x)
        return grad[0].permute(1, 2, 0).numpy()


class ClipBackend:
    """Pretrained contrastive text-image encoder (needs local weights)."""

    def __init__(self, model_name: str = "openai/clip-vit-base-patch32"):
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise RuntimeError(
                "transformers is not installed; install the [clip] extra") from e
        try:
            self.model = CLIPModel.from_pretrained(model_name)
            self.processor = CLIPProcessor.from_pretrained(model_name)
        except OSError as e:
            raise RuntimeError(
                f"weights for {model_name} are not available locally: {e}") from e
        self.model.eval()
        self.variant = model_name
        self.dim = int(self.model.config.projection_dim)
        self.image_size = int(self.model.config.vision_config.image_size)

    def info(self) -> dict:
        return {"dim": self.dim, "image_size": self.image_size,
                "feature_layers": 2, "variant": self.variant}

    def _pixel_tensor(self, image: np.ndarray) -> torch.Tensor:
        t = torch.from_numpy(np.asarray(image, dtype=np.float32))
        t = t.permute(2, 0, 1).unsqueeze(0)
        t = nn.functional.interpolate(t, size=self.image_size, mode="bilinear",
                                      align_corners=False, antialias=True)
        mean = torch.tensor([0.4815, 0.4578, 0.4082]).view(1, 3, 1, 1)
        std = torch.tensor([0.2686, 0.2613, 0.2758]).view(1, 3, 1, 1)
        return (t - mean) / std

    def embed_text(self, text: str) -> np.ndarray:
        inputs = self.processor(text=[text], return_tensors="pt", padding=True)
        with torch.no_grad():
            e = self.model.get_text_features(**inputs)[0]
        return (e / e.norm()).numpy()

    def _image_features(self, pixels: torch.Tensor) -> torch.Tensor:
        e = self.model.get_image_features(pixel_values=pixels)[0]
        return e / e.norm()

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return self._image_features(self._pixel_tensor(image)).numpy()

    def image_vjp(self, image: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        t = torch.from_numpy(np.asarray(image, dtype=np.float32)).requires_grad_(True)
        pixels = self._preprocess_differentiable(t)
        e = self._image_features(pixels)
        scalar = (e * torch.from_numpy(np.asarray(upstream, dtype=np.float32))).sum()
        (grad,) = torch.autograd.grad(scalar, t)
        return grad.numpy()

    def _preprocess_differentiable(self, t: torch.Tensor) -> torch.Tensor:
        x = t.permute(2, 0, 1).unsqueeze(0)
        x = nn.functional.interpolate(x, size=self.image_size, mode="bilinear",
                                      align_corners=False, antialias=True)
        mean = torch.tensor([0.4815, 0.4578, 0.4082]).view(1, 3, 1, 1)
        std = torch.tensor([0.2686, 0.2613, 0.2758]).view(1, 3, 1, 1)
        return (x - mean) / std

    def _hidden_feature_maps(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        out = self.model.vision_model(pixel_values=pixels,
                                      output_hidden_states=True)
        picks = [len(out.hidden_states) // 2, len(out.hidden_states) - 1]
        return [out.hidden_states[i][0] for i in picks]

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        with torch.no_grad():
            feats = self._hidden_feature_maps(self._pixel_tensor(image))
        return [f.numpy() for f in feats]

    def features_vjp(self, image: np.ndarray,
                     upstreams: list[np.ndarray]) -> np.ndarray:
        t = torch.from_numpy(np.asarray(image, dtype=np.float32)).requires_grad_(True)
        feats = self._hidden_feature_maps(self._preprocess_differentiable(t))
        scalar = sum(
            (f * torch.from_numpy(np.asarray(u, dtype=np.float32))).sum()
            for f, u in zip(feats, upstreams))
        (grad,) = torch.autograd.grad(scalar, t)
        return grad.numpy()


def make_backend(name: str, seed: int = 0):
    if name == "tiny":
        return TinyTorchBackend(seed=seed)
    if name == "clip":
        return ClipBackend()
    if name.startswith("clip:"):
        return ClipBackend(model_name=name.split(":", 1)[1])
    raise ValueError(f"unknown backend {name!r}")
