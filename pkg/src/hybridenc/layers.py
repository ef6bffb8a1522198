"""Layers with explicit forward/backward.

Every ``forward`` returns ``(out, cache)``; ``backward(dout, cache)`` returns
the input gradient and *accumulates* into the parameters' ``grad`` arrays.
Activations are row-major ``[T, d]``.
"""
from __future__ import annotations

import math

import numpy as np

from .errors import ShapeError
from .numeric_core import Parameter, gelu, gelu_grad, matmul


class Linear:
    def __init__(self, name: str, n_in: int, n_out: int, rng: np.random.Generator, std: float | None = None, bias=True):
        std = 1.0 / math.sqrt(n_in) if std is None else std
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(f"{name}.weight", rng.normal(0.0, std, size=(n_in, n_out)))
        self.bias = Parameter(f"{name}.bias", np.zeros(n_out)) if bias else None

    def params(self) -> list[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x):
        if x.shape[-1] != self.n_in:
            raise ShapeError(f"{self.weight.name}: expected last dim {self.n_in}, got {x.shape[-1]}")
        y = matmul(x, self.weight.value)
        if self.bias is not None:
            y = y + self.bias.value
        return y, x

    def backward(self, dy, x):
        x2 = x.reshape(-1, self.n_in)
        dy2 = dy.reshape(-1, self.n_out)
        self.weight.grad += matmul(x2.T, dy2)
        if self.bias is not None:
            self.bias.grad += dy2.sum(axis=0)
        return matmul(dy, self.weight.value.T)


class LayerNorm:
    def __init__(self, name: str, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gain = Parameter(f"{name}.gain", np.ones(dim))
        self.bias = Parameter(f"{name}.bias", np.zeros(dim))

    def params(self) -> list[Parameter]:
        return [self.gain, self.bias]

    def forward(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + self.eps)
        xhat = xc * rstd
        return xhat * self.gain.value + self.bias.value, (xhat, rstd)

    def backward(self, dy, cache):
        xhat, rstd = cache
        d = xhat.shape[-1]
        self.gain.grad += (dy * xhat).reshape(-1, d).sum(axis=0)
        self.bias.grad += dy.reshape(-1, d).sum(axis=0)
        dxhat = dy * self.gain.value
        return rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


class GeluMLP:
    """Linear -> GELU -> Linear."""

    def __init__(self, name: str, n_in: int, n_hidden: int, n_out: int, rng, out_std: float | None = None):
        self.fc1 = Linear(f"{name}.layer1", n_in, n_hidden, rng)
        self.fc2 = Linear(f"{name}.layer2", n_hidden, n_out, rng, std=out_std)

    def params(self) -> list[Parameter]:
        return self.fc1.params() + self.fc2.params()

    def forward(self, x):
        a, c1 = self.fc1.forward(x)
        h = gelu(a)
        y, c2 = self.fc2.forward(h)
        return y, (c1, a, c2)

    def backward(self, dy, cache):
        c1, a, c2 = cache
        dh = self.fc2.backward(dy, c2)
        return self.fc1.backward(dh * gelu_grad(a), c1)


class SelfAttention:
    """Multi-head self-attention without biases.

    ``causal=True`` masks keys after the query position. ``forward`` also
    returns the per-head attention probabilities ``[heads, T, T]`` inside the
    cache (``cache[3]``).
    """

    def __init__(self, name: str, dim: int, heads: int, rng, causal: bool = True):
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim, self.heads, self.causal = dim, heads, causal
        std = 1.0 / math.sqrt(dim)
        self.wq = Parameter(f"{name}.wq", rng.normal(0.0, std, size=(dim, dim)))
        self.wk = Parameter(f"{name}.wk", rng.normal(0.0, std, size=(dim, dim)))
        self.wv = Parameter(f"{name}.wv", rng.normal(0.0, std, size=(dim, dim)))
        self.wo = Parameter(f"{name}.wo", rng.normal(0.0, std, size=(dim, dim)))

    def params(self) -> list[Parameter]:
        return [self.wq, self.wk, self.wv, self.wo]

    def _split(self, x):
        t = x.shape[0]
        return x.reshape(t, self.heads, self.dim // self.heads).transpose(1, 0, 2)

    def _merge(self, x):
        h, t, dh = x.shape
        return x.transpose(1, 0, 2).reshape(t, h * dh)

    def forward(self, x):
        q = self._split(matmul(x, self.wq.value))
        k = self._split(matmul(x, self.wk.value))
        v = self._split(matmul(x, self.wv.value))
        scale = 1.0 / math.sqrt(self.dim // self.heads)
        s = matmul(q, k.transpose(0, 2, 1)) * scale
        t = x.shape[0]
        if self.causal:
            s = np.where(np.triu(np.ones((t, t), dtype=bool), k=1), -np.inf, s)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        p = e / e.sum(axis=-1, keepdims=True)
        o = self._merge(matmul(p, v))
        y = matmul(o, self.wo.value)
        return y, (x, q, k, p, v, o, scale)

    def backward(self, dy, cache):
        x, q, k, p, v, o, scale = cache
        self.wo.grad += matmul(o.T, dy)
        do = self._split(matmul(dy, self.wo.value.T))
        dv = matmul(p.transpose(0, 2, 1), do)
        dp = matmul(do, v.transpose(0, 2, 1))
        ds = p * (dp - (dp * p).sum(axis=-1, keepdims=True))
        dq = matmul(ds, k) * scale
        dk = matmul(ds.transpose(0, 2, 1), q) * scale
        dq, dk, dv = self._merge(dq), self._merge(dk), self._merge(dv)
        self.wq.grad += matmul(x.T, dq)
        self.wk.grad += matmul(x.T, dk)
        self.wv.grad += matmul(x.T, dv)
        return matmul(dq, self.wq.value.T) + matmul(dk, self.wk.value.T) + matmul(dv, self.wv.value.T)


class Block:
    """Pre-norm transformer block: ``x + attn(ln1(x))`` then ``x + mlp(ln2(x))``."""

    def __init__(self, name: str, dim: int, heads: int, rng, causal: bool = True, mlp_ratio: int = 4):
        self.ln1 = LayerNorm(f"{name}.ln1", dim)
        self.attn = SelfAttention(f"{name}.attn", dim, heads, rng, causal=causal)
        self.ln2 = LayerNorm(f"{name}.ln2", dim)
        self.mlp = GeluMLP(f"{name}.mlp", dim, mlp_ratio * dim, dim, rng)

    def params(self) -> list[Parameter]:
        return self.ln1.params() + self.attn.params() + self.ln2.params() + self.mlp.params()

    def forward(self, x):
        h1, c_ln1 = self.ln1.forward(x)
        a, c_attn = self.attn.forward(h1)
        x = x + a
        h2, c_ln2 = self.ln2.forward(x)
        m, c_mlp = self.mlp.forward(h2)
        return x + m, (c_ln1, c_attn, c_ln2, c_mlp)

    def backward(self, dy, cache):
        c_ln1, c_attn, c_ln2, c_mlp = cache
        dx = dy + self.ln2.backward(self.mlp.backward(dy, c_mlp), c_ln2)
        return dx + self.ln1.backward(self.attn.backward(dx, c_attn), c_ln1)
