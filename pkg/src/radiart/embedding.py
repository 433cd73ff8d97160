"""Joint text/image embedding providers and perceptual feature extractors.

Providers map text and images into one unit-norm embedding space and expose a
vector-Jacobian product on the image side, which is all the style losses need
to reach pixels. The toy provider is a fixed-seed stand-in built entirely from
smooth tape primitives, so its VJP is exactly the engine's own gradient; the
bridge provider (see bridge_client) serves real encoders over a wire protocol.
"""

from __future__ import annotations

import hashlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError


class CapabilityError(ValidationError):
    """Provider asked for an operation it does not advertise."""


class EmbeddingProvider:
    """Interface: unit-norm embed_text/embed_image plus image-side VJP."""

    name: str = "abstract"
    dim: int = 0
    capabilities: frozenset = frozenset()

    def embed_text(self, text: str) -> np.ndarray:
        raise NotImplementedError

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def image_embed_vjp(self, image: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def embed_text(provider: EmbeddingProvider, text: str) -> np.ndarray:
    if "text" not in provider.capabilities:
        raise CapabilityError(f"provider {provider.name!r} cannot embed text")
    if not text.strip():
        raise ValidationError("cannot embed empty text")
    return provider.embed_text(text)


def embed_image(provider: EmbeddingProvider, image: np.ndarray) -> np.ndarray:
    if "image" not in provider.capabilities:
        raise CapabilityError(f"provider {provider.name!r} cannot embed images")
    return provider.embed_image(np.asarray(image, dtype=np.float64))


def image_embed_vjp(provider: EmbeddingProvider, image: np.ndarray,
                    upstream: np.ndarray) -> np.ndarray:
    if "image_vjp" not in provider.capabilities:
        raise CapabilityError(f"provider {provider.name!r} has no image VJP")
    return provider.image_embed_vjp(np.asarray(image, dtype=np.float64),
                                    np.asarray(upstream, dtype=np.float64))


# ---------------------------------------------------------------------------
# area resampling as an explicit linear map (differentiable by construction)
# ---------------------------------------------------------------------------

def area_resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) row-stochastic overlap weights of an area filter."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, n_in)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap / scale
    return m


def area_resize_t(image: Tensor, out_h: int, out_w: int) -> Tensor:
    """Differentiable area resize of an (H, W, 3) tensor."""
    h, w, c = image.data.shape
    rh = area_resize_matrix(h, out_h)
    rw = area_resize_matrix(w, out_w)
    rows = ad.matmul(ad.constant(rh), ad.reshape(image, (h, w * c)))
    cols = ad.reshape(ad.transpose(ad.reshape(rows, (out_h, w, c)), (0, 2, 1)),
                      (out_h * c, w))
    mixed = ad.matmul(cols, ad.constant(rw.T))
    return ad.transpose(ad.reshape(mixed, (out_h, c, out_w)), (0, 2, 1))


def _token_seed(token: str, salt: int) -> int:
    digest = hashlib.blake2b(f"{salt}:{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class ToyEncoder(EmbeddingProvider):
    """Deterministic desk-scale encoder pair.

    Image path: area-downsample to input_size^2, flatten, fixed random affine
    map, tanh, L2-normalize — smooth everywhere, and the seeded bias keeps the
    pre-normalization vector away from zero for constant images. Text path:
    whitespace tokenize, hash each token to a seeded random vector, average,
    normalize (pure bag of words).
    """

    capabilities = frozenset({"text", "image", "image_vjp", "tape"})

    def __init__(self, seed: int = 0, dim: int = 64, input_size: int = 16):
        self.name = f"toy:{seed}"
        self.seed = seed
        self.dim = dim
        self.input_size = input_size
        rng = np.random.default_rng([seed, 0xE0])
        n_in = input_size * input_size * 3
        self._proj = rng.standard_normal((dim, n_in)) / np.sqrt(n_in)
        self._bias = 0.1 * rng.standard_normal((dim, 1))

    def embed_image_t(self, image: Tensor) -> Tensor:
        small = area_resize_t(image, self.input_size, self.input_size)
        flat = ad.reshape(small, (self.input_size * self.input_size * 3, 1))
        raw = ad.tanh(ad.add(ad.matmul(ad.constant(self._proj), flat), self._bias))
        return ad.normalize(ad.reshape(raw, (self.dim,)))

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        return self.embed_image_t(ad.constant(image)).data

    def image_embed_vjp(self, image: np.ndarray, upstream: np.ndarray) -> np.ndarray:
        with ad.Tape() as tape:
            img = ad.leaf(image)
            proj = ad.sum_(ad.mul(self.embed_image_t(img), upstream))
        return ad.backward(tape, proj).wrt(img)

    def embed_text(self, text: str) -> np.ndarray:
        tokens = text.split()
        if not tokens:
            raise ValidationError("cannot embed empty text")
        acc = np.zeros(self.dim)
        for token in tokens:
            rng = np.random.default_rng(_token_seed(token, self.seed))
            acc += rng.standard_normal(self.dim)
        acc /= len(tokens)
        return acc / np.linalg.norm(acc)


class FeatureExtractor:
    """Fixed-seed convolution pyramid: stride-2 valid convs with tanh.

    Plays the role of a pretrained perceptual network at desk scale; the
    layer list is the feature set the perceptual loss compares.
    """

    def __init__(self, seed: int = 0, levels: int = 3, base_channels: int = 8,
                 kernel: int = 3, stride: int = 2):
        self.name = f"toy:{seed}"
        self.levels = levels
        self.stride = stride
        rng = np.random.default_rng([seed, 0xFE])
        self.kernels = []
        cin = 3
        for level in range(levels):
            cout = base_channels * (2 ** level)
            scale = 1.0 / np.sqrt(kernel * kernel * cin)
            self.kernels.append(rng.standard_normal((kernel, kernel, cin, cout)) * scale)
            cin = cout

    def min_input_size(self) -> int:
        size = 1
        for k in reversed(self.kernels):
            size = (size - 1) * self.stride + k.shape[0]
        return size

    def features_t(self, image: Tensor) -> list[Tensor]:
        need = self.min_input_size()
        height, width = image.data.shape[:2]
        if height < need or width < need:
            raise ValidationError(
                f"image {width}x{height} below the {self.levels}-level "
                f"extractor minimum of {need}x{need}")
        outs = []
        h = image
        for kernel in self.kernels:
            h = ad.tanh(ad.conv2d(h, kernel, stride=self.stride))
            outs.append(h)
        return outs

    def features(self, image: np.ndarray) -> list[np.ndarray]:
        return [t.data for t in self.features_t(ad.constant(image))]

    def features_vjp(self, image: np.ndarray,
                     upstreams: list[np.ndarray]) -> np.ndarray:
        with ad.Tape() as tape:
            img = ad.leaf(image)
            feats = self.features_t(img)
            total = None
            for f, u in zip(feats, upstreams):
                term = ad.sum_(ad.mul(f, u))
                total = term if total is None else ad.add(total, term)
        return ad.backward(tape, total).wrt(img)


def extract_features(extractor: FeatureExtractor, image: np.ndarray) -> list[np.ndarray]:
    return extractor.features(np.asarray(image, dtype=np.float64))


def make_provider(spec: str, timeout: float = 30.0) -> EmbeddingProvider:
    """Provider factory: 'toy:<seed>' or 'bridge:<endpoint>'."""
    kind, _, rest = spec.partition(":")
    if kind == "toy":
        return ToyEncoder(seed=int(rest or 0))
    if kind == "bridge":
        from .bridge_client import BridgeProvider
        return BridgeProvider(rest, timeout=timeout)
    raise ValidationError(f"unknown provider spec {spec!r}")
