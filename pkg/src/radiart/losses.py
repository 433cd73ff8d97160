"""Style and reconstruction objectives.

Every loss has a tape-aware core (pass Tensors to differentiate, numpy to just
evaluate). ``total_style_loss`` reports a per-term breakdown; its twin
``style_pixel_gradient`` produces the exact gradient of the image-mediated
terms w.r.t. the rendered pixels by composing small embedding-space tapes with
provider VJPs, which is what lets parameter gradients be recovered tile by
tile afterwards. The ray-weight regularizer is the one term that bypasses
pixels; it re-enters on the tile tapes directly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embedding import CapabilityError, EmbeddingProvider, FeatureExtractor
from .errors import ValidationError

# image/text deltas shorter than this are treated as the declared neutral
# fallback instead of being normalized into a blown-up gradient
DEGENERATE_DELTA = 1e-8


@dataclass(frozen=True)
class StyleTask:
    """Prompt pair, negative bank, and loss weights for one stylization run."""

    t_tgt: str
    t_src: str = "a photo"
    negatives: tuple = ()
    tau: float = 0.07
    lambda_g: float = 0.2
    lambda_l: float = 0.1
    lambda_p: float = 2.0
    lambda_r: float = 0.1
    patch_fraction: float = 1.0 / 10.0
    patches_per_view: int = 4
    negatives_per_step: int = 32

    def __post_init__(self):
        if not self.t_tgt.strip():
            raise ValidationError("target prompt must be nonempty")
        if self.tau <= 0:
            raise ValidationError("temperature must be positive")
        for name in ("lambda_g", "lambda_l", "lambda_p", "lambda_r"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if not (0 < self.patch_fraction <= 1):
            raise ValidationError("patch_fraction must be in (0, 1]")
        if self.t_tgt in self.negatives:
            raise ValidationError("target prompt cannot be its own negative")
        object.__setattr__(self, "negatives", tuple(self.negatives))

    def with_negatives(self, negatives) -> "StyleTask":
        return replace(self, negatives=tuple(negatives))


def load_negative_bank(path: str | Path) -> list[str]:
    """One prompt per line, UTF-8; blank lines ignored."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    bank = [line.strip() for line in lines if line.strip()]
    if not bank:
        raise ValidationError(f"negative bank {path} is empty")
    return bank


def sample_negatives(task: StyleTask, seed: int) -> list[str]:
    """Per-step subsample of the bank, deterministic in the seed."""
    bank = task.negatives
    n = min(task.negatives_per_step, len(bank))
    if n == 0:
        return []
    idx = np.random.default_rng(seed).choice(len(bank), size=n, replace=False)
    return [bank[i] for i in idx]


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else ad.constant(x)


def _scalar(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


# ---------------------------------------------------------------------------
# individual objectives
# ---------------------------------------------------------------------------

def loss_reconstruction(rendered, target) -> Tensor:
    """Mean over rays of the squared color error (channel sum per ray)."""
    r = _as_tensor(rendered)
    t = np.asarray(_as_tensor(target).data)
    if r.data.shape != t.shape:
        raise ValidationError(f"shape mismatch {r.data.shape} vs {t.shape}")
    d = ad.sub(r, t)
    per_ray = ad.sum_(ad.mul(d, d), axis=-1)
    return ad.mean(per_ray)


def loss_dir_absolute(e_img, e_text) -> Tensor:
    """1 - cosine between unit image and text embeddings (in [0, 2])."""
    return ad.sub(1.0, ad.dot(_as_tensor(e_img), _as_tensor(e_text).data))


def loss_dir_relative(e_tgt_img, e_src_img, e_tgt_text,
                      e_src_text) -> tuple[Tensor, bool]:
    """1 - cosine of the image-space and text-space embedding deltas.

    Zero-length deltas cannot define a trajectory; those return the neutral
    value 1 with the degenerate flag set (and contribute no gradient).
    """
    d_img = ad.sub(_as_tensor(e_tgt_img), np.asarray(_as_tensor(e_src_img).data))
    d_txt = np.asarray(_as_tensor(e_tgt_text).data) \
        - np.asarray(_as_tensor(e_src_text).data)
    if np.linalg.norm(d_img.data) < DEGENERATE_DELTA \
            or np.linalg.norm(d_txt) < DEGENERATE_DELTA:
        return ad.constant(np.asarray(1.0)), True
    return ad.sub(1.0, ad.cosine(d_img, d_txt)), False


def loss_contrastive(v, v_pos, v_negs, tau: float) -> Tensor:
    """Softmax pull toward the positive against the negatives (InfoNCE).

    L = -log[exp(v.v+ / tau) / (exp(v.v+ / tau) + sum exp(v.v- / tau))],
    evaluated through log-sum-exp for stability.
    """
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    v = _as_tensor(v)
    negs = v_negs if isinstance(v_negs, Tensor) \
        else np.atleast_2d(np.asarray(v_negs, dtype=np.float64))
    n_negs = (negs.data if isinstance(negs, Tensor) else negs).shape[0]
    if n_negs == 0:
        raise ValidationError("contrastive loss needs at least one negative")
    inv_tau = 1.0 / tau
    s_pos = ad.mul(ad.dot(v, np.asarray(_as_tensor(v_pos).data)), inv_tau)
    col = ad.reshape(v, (v.data.shape[0], 1))
    s_neg = ad.mul(ad.reshape(ad.matmul(negs, col), (n_negs,)), inv_tau)
    z = ad.concat([ad.reshape(s_pos, (1,)), s_neg])
    return ad.sub(ad.logsumexp(z), s_pos)


def loss_weight_reg(weights, midpoints: np.ndarray) -> Tensor:
    """Pairwise spread penalty: sum over rays of sum_{i<j} w_i w_j (m_j - m_i).

    Midpoints must be sorted ascending per ray, which turns |m_i - m_j| into
    m_j - m_i and admits the O(K) prefix-sum form
    sum_j w_j (m_j S_{j-1} - P_{j-1}) with S, P prefix sums of w and w*m.
    """
    w = _as_tensor(weights)
    m = np.asarray(midpoints, dtype=np.float64)
    if w.data.shape != m.shape:
        raise ValidationError("weights and midpoints must share a shape")
    if np.any(w.data < 0):
        raise ValidationError("ray weights must be non-negative")
    if np.any(np.diff(m, axis=-1) < 0):
        raise ValidationError("midpoints must be sorted ascending")
    wm = ad.mul(w, m)
    s_excl = ad.sub(ad.cumsum(w, axis=-1), w)
    p_excl = ad.sub(ad.cumsum(wm, axis=-1), wm)
    per_sample = ad.mul(w, ad.sub(ad.mul(s_excl, m), p_excl))
    return ad.sum_(per_sample)


def loss_weight_reg_bruteforce(weights: np.ndarray, midpoints: np.ndarray) -> float:
    """O(K^2) double sum; the independent oracle for the prefix-sum form."""
    w = np.atleast_2d(weights)
    m = np.atleast_2d(midpoints)
    total = 0.0
    for wr, mr in zip(w, m):
        sep = np.abs(mr[:, None] - mr[None, :])
        total += 0.5 * float(wr @ sep @ wr)
    return total


def loss_perceptual(i_tgt, i_src, extractor: FeatureExtractor) -> Tensor:
    """Sum over feature levels of the mean squared feature difference."""
    src = np.asarray(_as_tensor(i_src).data)
    tgt_shape = i_tgt.data.shape if isinstance(i_tgt, Tensor) else np.shape(i_tgt)
    if tuple(tgt_shape) != src.shape:
        raise ValidationError("perceptual loss needs equal image sizes")
    src_feats = extractor.features(src)
    if isinstance(i_tgt, Tensor):
        tgt_feats = extractor.features_t(i_tgt)
    else:
        tgt_feats = [ad.constant(f) for f in extractor.features(np.asarray(i_tgt))]
    total = None
    for ft, fs in zip(tgt_feats, src_feats):
        d = ad.sub(ft, fs)
        term = ad.mean(ad.mul(d, d))
        total = term if total is None else ad.add(total, term)
    return total


def crop(image, rect: tuple[int, int, int, int]):
    x0, y0, w, h = rect
    if isinstance(image, Tensor):
        return image[y0:y0 + h, x0:x0 + w]
    return image[y0:y0 + h, x0:x0 + w]


def loss_glocal(image, patches, task: StyleTask, provider: EmbeddingProvider,
                negatives=None) -> tuple[Tensor, dict]:
    """Weighted global (whole image) + local (patch mean) contrastive loss."""
    negs_text = list(task.negatives if negatives is None else negatives)
    details: dict = {"global": 0.0, "local": 0.0}
    if task.lambda_g == 0 and task.lambda_l == 0:
        return ad.constant(np.asarray(0.0)), details
    if task.lambda_l > 0 and not patches:
        raise ValidationError("local contrastive term enabled but no patches given")
    e_pos = provider.embed_text(task.t_tgt)
    e_negs = np.stack([provider.embed_text(t) for t in negs_text])

    def embed(img):
        if isinstance(img, Tensor):
            if "tape" not in provider.capabilities:
                raise CapabilityError(
                    f"provider {provider.name!r} cannot trace embeddings on tape")
            return provider.embed_image_t(img)
        return ad.constant(provider.embed_image(np.asarray(img)))

    total = None
    if task.lambda_g > 0:
        lg = loss_contrastive(embed(image), e_pos, e_negs, task.tau)
        details["global"] = _scalar(lg)
        total = ad.mul(lg, task.lambda_g)
    if task.lambda_l > 0:
        local = None
        for patch in patches:
            lp = loss_contrastive(embed(patch), e_pos, e_negs, task.tau)
            local = lp if local is None else ad.add(local, lp)
        local = ad.mul(local, 1.0 / len(patches))
        details["local"] = _scalar(local)
        term = ad.mul(local, task.lambda_l)
        total = term if total is None else ad.add(total, term)
    return total, details


def total_style_loss(i_tgt, i_src, patch_rects, task: StyleTask,
                     provider: EmbeddingProvider, extractor: FeatureExtractor,
                     weights, midpoints, negatives=None) -> tuple[Tensor, dict]:
    """Directional + glocal-contrastive + weighted perceptual and reg terms.

    i_tgt (and weights) may be Tensors for end-to-end tracing; i_src is always
    a frozen source render. Returns the scalar plus a per-term breakdown.
    """
    e_src_img = provider.embed_image(np.asarray(_as_tensor(i_src).data))
    e_tgt_text = provider.embed_text(task.t_tgt)
    e_src_text = provider.embed_text(task.t_src)
    if isinstance(i_tgt, Tensor):
        e_tgt_img = provider.embed_image_t(i_tgt)
    else:
        e_tgt_img = ad.constant(provider.embed_image(np.asarray(i_tgt)))

    dir_term, degenerate = loss_dir_relative(e_tgt_img, e_src_img,
                                             e_tgt_text, e_src_text)
    patches = [crop(i_tgt, r) for r in patch_rects]
    con_term, con_details = loss_glocal(i_tgt, patches, task, provider,
                                        negatives=negatives)
    per_term = loss_perceptual(i_tgt, i_src, extractor)
    reg_term = loss_weight_reg(weights, midpoints)

    total = ad.add(ad.add(dir_term, con_term),
                   ad.add(ad.mul(per_term, task.lambda_p),
                          ad.mul(reg_term, task.lambda_r)))
    breakdown = {
        "dir": _scalar(dir_term),
        "dir_degenerate": degenerate,
        "con": _scalar(con_term),
        "con_global": con_details["global"],
        "con_local": con_details["local"],
        "per": _scalar(per_term),
        "reg": _scalar(reg_term),
        "total": _scalar(total),
    }
    return total, breakdown


# ---------------------------------------------------------------------------
# exact pixel gradient of the image-mediated terms
# ---------------------------------------------------------------------------

def style_pixel_gradient(i_tgt: np.ndarray, i_src: np.ndarray, patch_rects,
                         task: StyleTask, provider: EmbeddingProvider,
                         extractor: FeatureExtractor,
                         negatives=None) -> tuple[np.ndarray, dict]:
    """dL/d(pixels) for the directional, contrastive, and perceptual terms.

    The ray-weight regularizer does not reach the loss through pixels, so it
    contributes nothing here; the trainer re-adds it on each tile's tape.
    Embedding-space adjoint vectors are chained through provider VJPs, which
    keeps this path identical for local and remote encoders.
    """
    i_tgt = np.asarray(i_tgt, dtype=np.float64)
    i_src = np.asarray(i_src, dtype=np.float64)
    negs_text = list(task.negatives if negatives is None else negatives)
    grad = np.zeros_like(i_tgt)

    e_src_img = provider.embed_image(i_src)
    e_tgt_text = provider.embed_text(task.t_tgt)
    e_src_text = provider.embed_text(task.t_src)
    e_pos = e_tgt_text
    e_negs = np.stack([provider.embed_text(t) for t in negs_text]) \
        if negs_text else np.zeros((0, provider.dim))
    e_tgt_img = provider.embed_image(i_tgt)

    # directional + global contrastive share the whole-image embedding
    with ad.Tape() as tape:
        e = ad.leaf(e_tgt_img)
        dir_term, degenerate = loss_dir_relative(e, e_src_img,
                                                 e_tgt_text, e_src_text)
        whole = dir_term
        g_detail = 0.0
        if task.lambda_g > 0:
            if len(e_negs) == 0:
                raise ValidationError("contrastive loss needs at least one negative")
            lg = loss_contrastive(e, e_pos, e_negs, task.tau)
            g_detail = float(lg.data)
            whole = ad.add(whole, ad.mul(lg, task.lambda_g))
    d_embed = ad.backward(tape, whole).wrt(e)
    if np.any(d_embed):
        grad += provider.image_embed_vjp(i_tgt, d_embed)

    # local contrastive: one embedding-space tape per patch, scattered back
    l_detail = 0.0
    if task.lambda_l > 0:
        if not patch_rects:
            raise ValidationError("local contrastive term enabled but no patches given")
        scale = task.lambda_l / len(patch_rects)
        for rect in patch_rects:
            patch = crop(i_tgt, rect)
            e_patch = provider.embed_image(patch)
            with ad.Tape() as tape:
                ep = ad.leaf(e_patch)
                lp = loss_contrastive(ep, e_pos, e_negs, task.tau)
            l_detail += float(lp.data) / len(patch_rects)
            d_patch = ad.backward(tape, lp).wrt(ep)
            x0, y0, w, h = rect
            grad[y0:y0 + h, x0:x0 + w] += scale * provider.image_embed_vjp(
                patch, d_patch)

    # perceptual: feature-space adjoints through the extractor VJP
    feats_tgt = extractor.features(i_tgt)
    feats_src = extractor.features(i_src)
    per_val = 0.0
    upstreams = []
    for ft, fs in zip(feats_tgt, feats_src):
        d = ft - fs
        per_val += float(np.mean(d * d))
        upstreams.append(task.lambda_p * 2.0 * d / d.size)
    if task.lambda_p > 0:
        grad += extractor.features_vjp(i_tgt, upstreams)

    breakdown = {
        "dir": float(dir_term.data),
        "dir_degenerate": degenerate,
        "con_global": g_detail,
        "con_local": l_detail,
        "con": task.lambda_g * g_detail + task.lambda_l * l_detail,
        "per": per_val,
    }
    return grad, breakdown
