"""Dense float64 substrate: fixed-order matmul, losses with analytic gradients,
named parameters, AdamW, a central-difference gradient checker, seeded RNG
streams and the ``MVT1`` tensor file format.

Tensors are plain ``numpy.ndarray`` objects in float64.
"""
from __future__ import annotations

import hashlib
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from .errors import DataError, ShapeError

MVT_MAGIC = b"MVT1"

_SIG_HI = 1.0 - 2.0**-53
_SIG_LO = np.nextafter(0.0, 1.0)


# -----------------------------------------------------------------------------
# RNG
# -----------------------------------------------------------------------------


def rng_for(seed: int, name: str) -> np.random.Generator:
    """Independent PCG64 stream derived from ``(seed, name)``.

    The name is hashed, so streams for different components never overlap and
    adding a component does not shift the others.
    """
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, *words])))


# -----------------------------------------------------------------------------
# Forward ops
# -----------------------------------------------------------------------------


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def matmul(a, b) -> np.ndarray:
    """Matrix product over the last two axes with a fixed summation order.

    The k-th partial products are accumulated strictly left to right, so the
    result equals a scalar triple loop bit for bit regardless of the BLAS
    build. Leading axes broadcast like ``np.matmul``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    k = a.shape[-1]
    if b.shape[-2] != k:
        raise ShapeError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if k == 0:
        lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
        return np.zeros(lead + (a.shape[-2], b.shape[-1]))
    out = a[..., :, 0:1] * b[..., 0:1, :]
    for j in range(1, k):
        out += a[..., :, j : j + 1] * b[..., j : j + 1, :]
    return out


def sigmoid(x) -> np.ndarray:
    """Logistic function, clamped so the result stays strictly inside (0, 1)."""
    x = as_tensor(x)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return np.clip(out, _SIG_LO, _SIG_HI)


def softplus(x) -> np.ndarray:
    x = as_tensor(x)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def relu(x) -> np.ndarray:
    return np.maximum(as_tensor(x), 0.0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> np.ndarray:
    """tanh-approximated GELU."""
    x = as_tensor(x)
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def gelu_grad(x) -> np.ndarray:
    x = as_tensor(x)
    u = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du


def softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x, axis: int = -1) -> np.ndarray:
    x = as_tensor(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


# -----------------------------------------------------------------------------
# Losses (value, gradient w.r.t. logits)
# -----------------------------------------------------------------------------


def bce_with_logits(logits, labels) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on raw logits.

    Uses ``softplus(x) - y*x``, which never exponentiates a large positive
    number. Returns ``(loss, dloss/dlogits)``.
    """
    x = as_tensor(logits).reshape(-1)
    y = as_tensor(labels).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"logits has {x.size} entries, labels has {y.size}")
    if x.size == 0:
        raise ShapeError("bce_with_logits on empty input")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise DataError("labels must be 0 or 1")
    n = x.size
    loss = float(np.sum(softplus(x) - y * x) / n)
    grad = (sigmoid(x) - y) / n
    return loss, grad.reshape(np.shape(logits))


def cross_entropy_logits(logits, targets) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax at ``targets``; gradient ``(softmax - onehot)/n``."""
    z = as_tensor(logits)
    if z.ndim != 2:
        raise ShapeError(f"logits must be [n, V], got {z.shape}")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    n, vocab = z.shape
    if t.size != n:
        raise ShapeError(f"{n} logit rows but {t.size} targets")
    if n == 0:
        raise ShapeError("cross_entropy_logits on empty input")
    if np.any(t < 0) or np.any(t >= vocab):
        raise IndexError(f"target ids must lie in [0, {vocab})")
    logp = log_softmax(z, axis=1)
    rows = np.arange(n)
    loss = float(-np.sum(logp[rows, t]) / n)
    grad = np.exp(logp)
    grad[rows, t] -= 1.0
    grad /= n
    return loss, grad


# -----------------------------------------------------------------------------
# Parameters and optimizer
# -----------------------------------------------------------------------------


def tensor_checksum(value: np.ndarray) -> str:
    """sha256 over the dims and little-endian float64 payload."""
    v = np.ascontiguousarray(value, dtype="<f8")
    h = hashlib.sha256()
    h.update(struct.pack("<I", v.ndim))
    h.update(struct.pack(f"<{v.ndim}I", *v.shape))
    h.update(v.tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class Parameter:
    name: str
    value: np.ndarray
    trainable: bool = True
    grad: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise ShapeError(f"{self.name}: grad {self.grad.shape} != value {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def checksum(self) -> str:
        return tensor_checksum(self.value)


class AdamW:
    """AdamW with decoupled weight decay.

    State lives per parameter name. Parameters with ``trainable=False`` are
    skipped entirely, so neither their values nor their moments change.
    """

    def __init__(self, params: Iterable[Parameter], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        adamw_step(self.params, self.lr, self.betas, self.weight_decay, self.step_count, self.state, self.eps)


def adamw_step(params, lr, betas, weight_decay, step_count, state=None, eps=1e-8) -> dict:
    """One AdamW update at 1-based ``step_count``; returns the moment state."""
    if state is None:
        state = {}
    b1, b2 = betas
    c1 = 1.0 - b1**step_count
    c2 = 1.0 - b2**step_count
    for p in params:
        if not p.trainable:
            continue
        m, v = state.get(p.name) or (np.zeros_like(p.value), np.zeros_like(p.value))
        m = b1 * m + (1.0 - b1) * p.grad
        v = b2 * v + (1.0 - b2) * p.grad * p.grad
        state[p.name] = (m, v)
        if weight_decay:
            p.value -= lr * weight_decay * p.value
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# -----------------------------------------------------------------------------
# Gradient checking
# -----------------------------------------------------------------------------


def finite_diff_check(f: Callable[[], float], param: Parameter, epsilon: float = 1e-5, analytic=None) -> float:
    """Max relative error between central differences of ``f`` and the analytic gradient.

    ``analytic`` defaults to a copy of ``param.grad`` taken on entry. ``f`` is
    evaluated with each coordinate of ``param.value`` shifted by ``±epsilon``;
    the value is restored exactly afterwards. The denominator per coordinate is
    ``max(|analytic|, |numeric|, 1e-8)``.
    """
    g, _, rel = finite_diff_errors(f, param, epsilon, analytic)
    return float(rel.max()) if rel.size else 0.0


def finite_diff_errors(f: Callable[[], float], param: Parameter, epsilon: float = 1e-5, analytic=None):
    """Per-coordinate ``(analytic, numeric, relative error)``, flattened."""
    g = np.array(param.grad if analytic is None else analytic, dtype=np.float64)
    if g.shape != param.value.shape:
        raise ShapeError(f"analytic gradient {g.shape} != parameter {param.value.shape}")
    flat = param.value.reshape(-1)
    gflat = g.reshape(-1)
    num = np.empty_like(gflat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + epsilon
        fp = f()
        flat[i] = orig - epsilon
        fm = f()
        flat[i] = orig
        num[i] = (fp - fm) / (2.0 * epsilon)
    rel = np.abs(gflat - num) / np.maximum(np.maximum(np.abs(gflat), np.abs(num)), 1e-8)
    return gflat, num, rel


# -----------------------------------------------------------------------------
# MVT1 file format
# -----------------------------------------------------------------------------


def encode_mvt(t) -> bytes:
    arr = as_tensor(t)
    if not np.all(np.isfinite(arr)):
        raise DataError("refusing to serialize non-finite tensor")
    head = MVT_MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def decode_mvt(buf: bytes) -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MVT_MAGIC:
        raise DataError("not an MVT1 tensor (bad magic)")
    (ndim,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * ndim
    if len(buf) < off:
        raise DataError("truncated MVT1 header")
    dims = struct.unpack_from(f"<{ndim}I", buf, 8)
    count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
    if len(buf) != off + 4 * count:
        raise DataError(f"MVT1 payload has {len(buf) - off} bytes, dims {dims} need {4 * count}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DataError("MVT1 payload contains NaN or Inf")
    return arr.reshape(dims)


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(path) or "."
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_mvt(path, t) -> None:
    atomic_write_bytes(path, encode_mvt(t))


def read_mvt(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return decode_mvt(fh.read())
