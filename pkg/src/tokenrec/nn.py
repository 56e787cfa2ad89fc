"""Minimal neural-net primitives in pure NumPy with explicit backward passes.

Everything runs in float64. Modules are stateless across calls: ``forward``
returns ``(y, cache)`` and ``backward`` consumes that cache, so inference with
``need_cache=False`` is pure and safe for concurrent use. Gradients accumulate
into ``Param.grad`` (call ``zero_grads`` between steps).

Shape convention: activations are ``(..., P, D)`` where leading axes broadcast
(typically a batch axis), P is sequence length and D the model width.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

SQRT2 = math.sqrt(2.0)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Param:
    """A trainable tensor with its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


def zero_grads(params) -> None:
    for _, p in params:
        p.grad[...] = 0.0


def check_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")


def softmax(z: np.ndarray) -> np.ndarray:
    """Numerically stable softmax along the last axis. -inf entries map to 0."""
    zmax = np.max(z, axis=-1, keepdims=True)
    e = np.exp(z - zmax)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = np.max(z, axis=-1, keepdims=True)
    zs = z - zmax
    return zs - np.log(np.exp(zs).sum(axis=-1, keepdims=True))


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / SQRT2))


def gelu_grad(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(x / SQRT2)) + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


class Linear:
    """y = x @ W + b with W of shape (n_in, n_out)."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 scale: float | None = None, bias: bool = True):
        if scale is None:
            scale = 1.0 / math.sqrt(n_in)
        self.W = Param(rng.normal(0.0, scale, size=(n_in, n_out)))
        self.b = Param(np.zeros(n_out)) if bias else None

    def params(self, prefix=""):
        yield prefix + "W", self.W
        if self.b is not None:
            yield prefix + "b", self.b

    def forward(self, x, need_cache=False):
        y = x @ self.W.value
        if self.b is not None:
            y = y + self.b.value
        return y, (x if need_cache else None)

    def backward(self, dy, x):
        flat_x = x.reshape(-1, x.shape[-1])
        flat_dy = dy.reshape(-1, dy.shape[-1])
        self.W.grad += flat_x.T @ flat_dy
        if self.b is not None:
            self.b.grad += flat_dy.sum(axis=0)
        return dy @ self.W.value.T


class LayerNorm:
    """Per-position normalization over the last axis with learned affine."""

    EPS = 1e-5

    def __init__(self, dim: int):
        self.gamma = Param(np.ones(dim))
        self.beta = Param(np.zeros(dim))

    def params(self, prefix=""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def forward(self, x, need_cache=False):
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        inv_sigma = 1.0 / np.sqrt(var + self.EPS)
        xhat = (x - mu) * inv_sigma
        y = xhat * self.gamma.value + self.beta.value
        return y, ((xhat, inv_sigma) if need_cache else None)

    def normalized(self, x):
        """The pre-affine normalized stream (for diagnostics)."""
        mu = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        return (x - mu) / np.sqrt(var + self.EPS)

    def backward(self, dy, cache):
        xhat, inv_sigma = cache
        axes = tuple(range(dy.ndim - 1))
        self.gamma.grad += (dy * xhat).sum(axis=axes)
        self.beta.grad += dy.sum(axis=axes)
        ghat = dy * self.gamma.value
        m1 = ghat.mean(axis=-1, keepdims=True)
        m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
        return (ghat - m1 - xhat * m2) * inv_sigma


class SelfAttention:
    """Multi-head self-attention over (B, P, D) with a boolean (P, P) mask.

    Masked score entries are set to -inf before the softmax, so disallowed
    positions carry exactly zero attention weight and exactly zero gradient.
    """

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator,
                 out_scale: float | None = None):
        if width % n_heads != 0:
            raise ValueError(f"width {width} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.qkv = Linear(width, 3 * width, rng)
        self.out = Linear(width, width, rng, scale=out_scale)

    def params(self, prefix=""):
        yield from self.qkv.params(prefix + "qkv.")
        yield from self.out.params(prefix + "out.")

    def _split_heads(self, x):
        b, p, _ = x.shape
        return x.reshape(b, p, self.n_heads, self.head_dim).transpose(0, 2, 1, 3)

    def _merge_heads(self, x):
        b, h, p, d = x.shape
        return x.transpose(0, 2, 1, 3).reshape(b, p, h * d)

    def forward(self, x, mask, need_cache=False):
        qkv, qkv_cache = self.qkv.forward(x, need_cache)
        q, k, v = np.split(qkv, 3, axis=-1)
        q, k, v = map(self._split_heads, (q, k, v))
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale
        scores = np.where(mask, scores, -np.inf)
        w = softmax(scores)
        ctx = w @ v
        y, out_cache = self.out.forward(self._merge_heads(ctx), need_cache)
        cache = (qkv_cache, q, k, v, w, out_cache) if need_cache else None
        return y, cache

    def backward(self, dy, cache):
        qkv_cache, q, k, v, w, out_cache = cache
        dctx = self._split_heads(self.out.backward(dy, out_cache))
        dw = dctx @ v.transpose(0, 1, 3, 2)
        dv = w.transpose(0, 1, 3, 2) @ dctx
        # softmax backward; masked entries have w == 0 so their ds is exactly 0
        ds = (dw - (dw * w).sum(axis=-1, keepdims=True)) * w
        scale = 1.0 / math.sqrt(self.head_dim)
        dq = (ds @ k) * scale
        dk = (ds.transpose(0, 1, 3, 2) @ q) * scale
        dqkv = np.concatenate(
            [self._merge_heads(g) for g in (dq, dk, dv)], axis=-1)
        return self.qkv.backward(dqkv, qkv_cache)


class Mlp:
    """Position-wise feed-forward: Linear -> GELU -> Linear."""

    def __init__(self, width: int, rng: np.random.Generator, hidden_mult: int = 4,
                 out_scale: float | None = None):
        hidden = hidden_mult * width
        self.fc1 = Linear(width, hidden, rng)
        self.fc2 = Linear(hidden, width, rng, scale=out_scale)

    def params(self, prefix=""):
        yield from self.fc1.params(prefix + "fc1.")
        yield from self.fc2.params(prefix + "fc2.")

    def forward(self, x, need_cache=False):
        h, c1 = self.fc1.forward(x, need_cache)
        a = gelu(h)
        y, c2 = self.fc2.forward(a, need_cache)
        return y, ((h, c1, c2) if need_cache else None)

    def backward(self, dy, cache):
        h, c1, c2 = cache
        da = self.fc2.backward(dy, c2)
        return self.fc1.backward(da * gelu_grad(h), c1)


class TransformerBlock:
    """Pre-norm block: x + Attn(LN(x)), then + MLP(LN(.))."""

    def __init__(self, width: int, n_heads: int, rng: np.random.Generator,
                 out_scale: float | None = None):
        self.ln1 = LayerNorm(width)
        self.attn = SelfAttention(width, n_heads, rng, out_scale=out_scale)
        self.ln2 = LayerNorm(width)
        self.mlp = Mlp(width, rng, out_scale=out_scale)

    def params(self, prefix=""):
        yield from self.ln1.params(prefix + "ln1.")
        yield from self.attn.params(prefix + "attn.")
        yield from self.ln2.params(prefix + "ln2.")
        yield from self.mlp.params(prefix + "mlp.")

    def forward(self, x, mask, need_cache=False):
        n1, c_ln1 = self.ln1.forward(x, need_cache)
        a, c_attn = self.attn.forward(n1, mask, need_cache)
        h = x + a
        n2, c_ln2 = self.ln2.forward(h, need_cache)
        m, c_mlp = self.mlp.forward(n2, need_cache)
        y = h + m
        return y, ((c_ln1, c_attn, c_ln2, c_mlp) if need_cache else None)

    def backward(self, dy, cache):
        c_ln1, c_attn, c_ln2, c_mlp = cache
        dn2 = self.mlp.backward(dy, c_mlp)
        dh = dy + self.ln2.backward(dn2, c_ln2)
        dn1 = self.attn.backward(dh, c_attn)
        return dh + self.ln1.backward(dn1, c_ln1)


class Sgd:
    """Plain stochastic gradient descent with fixed step size."""

    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params) -> None:
        for _, p in params:
            p.value -= self.lr * p.grad


class Adam:
    """Adam with bias correction."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in params:
            m = self._m.setdefault(name, np.zeros_like(p.value))
            v = self._v.setdefault(name, np.zeros_like(p.value))
            m *= b1
            m += (1.0 - b1) * p.grad
            v *= b2
            v += (1.0 - b2) * p.grad * p.grad
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(kind: str, lr: float):
    if kind == "sgd":
        return Sgd(lr)
    if kind == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {kind!r}")
