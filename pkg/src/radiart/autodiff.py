"""Reverse-mode automatic differentiation on numpy arrays.

A ``Tape`` records every primitive operation applied to ``Tensor`` values
while it is active; ``backward`` replays the records in reverse to produce
exact gradients for every leaf. Outside an active tape the same operations
evaluate eagerly and record nothing, so forward-only code paths (full-image
renders, dataset baking) pay no graph cost.

All reductions use a fixed evaluation order, so repeated runs over identical
inputs are bit-identical. Accumulation precision follows the leaf dtype:
float64 for verification, float32 acceptable for training loops.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class UsageError(ValueError):
    """Raised when the engine is driven outside its contract."""


class NumericError(ArithmeticError):
    """Raised when a NaN is detected during gradient propagation."""


class Tape:
    """Records primitive ops in creation order. One active tape at a time."""

    _active: "Tape | None" = None

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise UsageError("nested tapes are not supported")
        Tape._active = self
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        Tape._active = None


class Tensor:
    """Array value plus (when recorded on a tape) its backward closure."""

    __slots__ = ("data", "op", "parents", "vjp")

    def __init__(self, data: np.ndarray, op: str = "const",
                 parents: tuple = (), vjp=None) -> None:
        self.data = data
        self.op = op
        self.parents = parents
        self.vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    # arithmetic sugar; scalars stay python numbers so float32 graphs
    # are not silently promoted to float64
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return powc(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)


def leaf(array) -> Tensor:
    """Differentiable input. Gradients accumulate for leaves during backward."""
    data = np.asarray(array)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    return Tensor(data, op="leaf")


def constant(array) -> Tensor:
    """Non-differentiable value (gradient is discarded)."""
    data = np.asarray(array)
    if not np.issubdtype(data.dtype, np.floating):
        data = data.astype(np.float64)
    return Tensor(data, op="const")


def _record(data: np.ndarray, op: str, parents: tuple, vjp) -> Tensor:
    tape = Tape._active
    if tape is None:
        return Tensor(data, op=op)
    t = Tensor(data, op=op, parents=parents, vjp=vjp)
    tape.nodes.append(t)
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape``."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _val(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else x


# ---------------------------------------------------------------------------
# elementwise binary ops (numpy broadcasting rules apply)
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av + bv
    parents, pulls = _binary_parents(a, b, out)

    def vjp(g):
        return pulls(g, lambda g: g, lambda g: g)

    return _record(out, "add", parents, vjp)


def sub(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av - bv
    parents, pulls = _binary_parents(a, b, out)

    def vjp(g):
        return pulls(g, lambda g: g, lambda g: -g)

    return _record(out, "sub", parents, vjp)


def mul(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av * bv
    parents, pulls = _binary_parents(a, b, out)

    def vjp(g):
        return pulls(g, lambda g: g * bv, lambda g: g * av)

    return _record(out, "mul", parents, vjp)


def div(a, b) -> Tensor:
    av, bv = _val(a), _val(b)
    out = av / bv
    parents, pulls = _binary_parents(a, b, out)

    def vjp(g):
        return pulls(g, lambda g: g / bv, lambda g: -g * av / (bv * bv))

    return _record(out, "div", parents, vjp)


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient routes to the first argument."""
    av, bv = _val(a), _val(b)
    out = np.maximum(av, bv)
    take_a = av >= bv
    parents, pulls = _binary_parents(a, b, out)

    def vjp(g):
        return pulls(g, lambda g: g * take_a, lambda g: g * ~take_a)

    return _record(out, "maximum", parents, vjp)


def _binary_parents(a, b, out):
    """Builds the (parents, pull) pair shared by all binary ops.

    ``pull`` applies the per-argument local gradient and unbroadcasts each
    result to its parent's shape, skipping non-Tensor operands.
    """
    a_t = isinstance(a, Tensor)
    b_t = isinstance(b, Tensor)
    parents = tuple(x for x in (a, b) if isinstance(x, Tensor))
    a_shape = a.data.shape if a_t else None
    b_shape = b.data.shape if b_t else None

    def pulls(g, da, db):
        grads = []
        if a_t:
            grads.append(_unbroadcast(np.asarray(da(g)), a_shape))
        if b_t:
            grads.append(_unbroadcast(np.asarray(db(g)), b_shape))
        return tuple(grads)

    return parents, pulls


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------

def neg(x: Tensor) -> Tensor:
    return _record(-x.data, "neg", (x,), lambda g: (-g,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _record(out, "exp", (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xv = x.data
    return _record(np.log(xv), "log", (x,), lambda g: (g / xv,))


def sin(x: Tensor) -> Tensor:
    xv = x.data
    return _record(np.sin(xv), "sin", (x,), lambda g: (g * np.cos(xv),))


def cos(x: Tensor) -> Tensor:
    xv = x.data
    return _record(np.cos(xv), "cos", (x,), lambda g: (-g * np.sin(xv),))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _record(out, "sqrt", (x,), lambda g: (g * (0.5 / out),))


def powc(x: Tensor, p: float) -> Tensor:
    xv = x.data
    out = xv ** p
    return _record(out, "powc", (x,), lambda g: (g * p * xv ** (p - 1),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _record(out, "tanh", (x,), lambda g: (g * (1.0 - out * out),))


def _sigmoid_parts(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # z = exp(-|x|) never overflows and serves both softplus and its slope;
    # sigmoid folds the sign branch into copysign: 0.5 +- (1/(1+z) - 0.5)
    z = np.abs(x)
    np.negative(z, out=z)
    np.exp(z, out=z)
    s = z + 1.0
    np.divide(1.0, s, out=s)
    s -= 0.5
    np.copysign(s, x, out=s)
    s += 0.5
    return z, s


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    return _sigmoid_parts(x)[1]


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_stable(x.data)
    return _record(out, "sigmoid", (x,), lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    xv = x.data
    # log(1 + e^x) = max(x, 0) + log1p(e^{-|x|}), stable at both tails
    z, slope = _sigmoid_parts(xv)
    out = np.log1p(z)
    out += np.maximum(xv, 0.0)
    return _record(out, "softplus", (x,), lambda g: (g * slope,))


# ---------------------------------------------------------------------------
# reductions and scans
# ---------------------------------------------------------------------------

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xv = x.data
    out = xv.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, xv.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, xv.shape).copy(),)

    return _record(np.asarray(out), "sum", (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    xv = x.data
    out = xv.mean(axis=axis, keepdims=keepdims)
    count = xv.size if axis is None else xv.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, xv.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, xv.shape).copy(),)

    return _record(np.asarray(out), "mean", (x,), vjp)


def max_(x: Tensor, axis=None) -> Tensor:
    """Max reduction; the gradient flows to the first maximal element."""
    xv = x.data
    if axis is None:
        out = xv.max()
        idx = np.unravel_index(np.argmax(xv), xv.shape)

        def vjp(g):
            gx = np.zeros_like(xv)
            gx[idx] = g
            return (gx,)

        return _record(np.asarray(out), "max", (x,), vjp)

    out = xv.max(axis=axis)
    amax = np.expand_dims(np.argmax(xv, axis=axis), axis)

    def vjp(g):
        gx = np.zeros_like(xv)
        np.put_along_axis(gx, amax, np.expand_dims(g, axis), axis)
        return (gx,)

    return _record(out, "max_axis", (x,), vjp)


def cumsum(x: Tensor, axis: int = -1) -> Tensor:
    xv = x.data
    out = np.cumsum(xv, axis=axis)

    def vjp(g):
        return (np.flip(np.cumsum(np.flip(g, axis=axis), axis=axis), axis=axis),)

    return _record(out, "cumsum", (x,), vjp)


def cumprod(x: Tensor, axis: int = -1) -> Tensor:
    """Cumulative product. Gradient assumes strictly nonzero entries."""
    xv = x.data
    out = np.cumprod(xv, axis=axis)

    def vjp(g):
        rev = np.flip(np.cumsum(np.flip(g * out, axis=axis), axis=axis), axis=axis)
        return (rev / xv,)

    return _record(out, "cumprod", (x,), vjp)


# ---------------------------------------------------------------------------
# linear algebra / shape ops
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b) -> Tensor:
    av, bv = _val(a), _val(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise UsageError("matmul expects 2-D operands")
    out = av @ bv
    parents, pulls = _binary_parents(a, b, out)

    def vjp(g):
        return pulls(g, lambda g: g @ bv.T, lambda g: av.T @ g)

    return _record(out, "matmul", parents, vjp)


def reshape(x: Tensor, shape) -> Tensor:
    xv = x.data
    return _record(xv.reshape(shape), "reshape", (x,),
                   lambda g: (g.reshape(xv.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    xv = x.data
    inv = None if axes is None else np.argsort(axes)
    return _record(np.transpose(xv, axes), "transpose", (x,),
                   lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    vals = [_val(p) for p in parts]
    out = np.concatenate(vals, axis=axis)
    sizes = [v.shape[axis] for v in vals]
    splits = np.cumsum(sizes)[:-1]
    tensor_mask = [isinstance(p, Tensor) for p in parts]
    parents = tuple(p for p in parts if isinstance(p, Tensor))

    def vjp(g):
        pieces = np.split(g, splits, axis=axis)
        return tuple(piece for piece, is_t in zip(pieces, tensor_mask) if is_t)

    return _record(out, "concat", parents, vjp)


def getitem(x: Tensor, idx) -> Tensor:
    xv = x.data
    out = xv[idx]

    def vjp(g):
        gx = np.zeros_like(xv)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(np.asarray(out), "getitem", (x,), vjp)


def conv2d(x: Tensor, w, stride: int = 1) -> Tensor:
    """Valid 2-D correlation. x: (H, W, Cin); w: (kh, kw, Cin, Cout)."""
    xv, wv = _val(x), _val(w)
    kh, kw, cin, cout = wv.shape
    if xv.ndim != 3 or xv.shape[2] != cin:
        raise UsageError("conv2d expects image (H, W, Cin) matching kernel Cin")
    win = np.lib.stride_tricks.sliding_window_view(xv, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]  # (Ho, Wo, Cin, kh, kw)
    out = np.einsum("hwcij,ijco->hwo", win, wv, optimize=True)
    ho, wo = out.shape[:2]
    parents, pulls = _binary_parents(x, w, out)

    def d_x(g):
        gx = np.zeros_like(xv)
        for i in range(kh):
            for j in range(kw):
                patch = np.einsum("hwo,co->hwc", g, wv[i, j], optimize=True)
                gx[i:i + ho * stride:stride, j:j + wo * stride:stride, :] += patch
        return gx

    def d_w(g):
        return np.einsum("hwcij,hwo->ijco", win, g, optimize=True)

    def vjp(g):
        return pulls(g, d_x, d_w)

    return _record(out, "conv2d", parents, vjp)


# ---------------------------------------------------------------------------
# composite helpers used throughout the losses
# ---------------------------------------------------------------------------

def dot(a: Tensor, b) -> Tensor:
    return sum_(mul(a, b))


def norm(x: Tensor) -> Tensor:
    return sqrt(sum_(mul(x, x)))


def cosine(a: Tensor, b) -> Tensor:
    return div(dot(a, b), mul(norm(a), norm(b)))


def normalize(x: Tensor) -> Tensor:
    return div(x, norm(x))


def logsumexp(z: Tensor) -> Tensor:
    """Stable log-sum-exp over a 1-D tensor."""
    m = max_(z)
    return add(m, log(sum_(exp(sub(z, m)))))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

class Grads:
    """Gradient lookup keyed by tensor identity; untouched leaves give zero."""

    def __init__(self, table: dict) -> None:
        self._table = table

    def wrt(self, t: Tensor) -> np.ndarray:
        g = self._table.get(t)
        if g is None:
            return np.zeros_like(t.data)
        return g


def backward(tape: Tape, output: Tensor, check_numerics: bool = False) -> Grads:
    """Exact reverse-mode gradients of a scalar output w.r.t. all leaves.

    Nodes are visited in reverse recording order; every adjoint is fully
    accumulated before its node is expanded, and accumulation happens in a
    fixed order, so results are reproducible bit-for-bit.
    """
    if output.data.size != 1:
        raise UsageError(f"backward needs a scalar output, got shape {output.data.shape}")
    acc: dict[Tensor, np.ndarray] = {output: np.ones_like(output.data)}
    for node in reversed(tape.nodes):
        g = acc.pop(node, None)
        if g is None or node.vjp is None:
            continue
        if check_numerics and (np.isnan(g).any() or np.isnan(node.data).any()):
            raise NumericError(f"NaN encountered at op {node.op!r}")
        for parent, pg in zip(node.parents, node.vjp(g)):
            held = acc.get(parent)
            if held is None:
                acc[parent] = np.asarray(pg)
            else:
                acc[parent] = held + pg
    return Grads(acc)


def grad_check(f: Callable[[Tensor], Tensor], theta: np.ndarray, h: float) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``f`` maps a Tensor to a scalar Tensor. The error at coordinate i is
    |fd_i - g_i| / max(1, |g_i|) with fd the two-sided difference at step h.
    """
    if h <= 0:
        raise UsageError("grad_check needs h > 0")
    theta = np.asarray(theta, dtype=np.float64)
    with Tape() as tape:
        t = leaf(theta)
        out = f(t)
    g = backward(tape, out).wrt(t).ravel()

    flat = theta.ravel()
    worst = 0.0
    for i in range(flat.size):
        bump = np.zeros_like(flat)
        bump[i] = h
        hi = float(f(constant((flat + bump).reshape(theta.shape))).data)
        lo = float(f(constant((flat - bump).reshape(theta.shape))).data)
        fd = (hi - lo) / (2.0 * h)
        err = abs(fd - g[i]) / max(1.0, abs(g[i]))
        worst = max(worst, err)
    return worst
