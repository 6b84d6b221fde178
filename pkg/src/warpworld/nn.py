"""Small neural-net primitives with explicit backward passes.

Everything is plain numpy; each *_fwd returns what its *_bwd needs. Weight
gradients fold all leading dimensions, so the same code serves (B, T, D) and
(B, D) activations. Dtype follows the inputs (float64 for gradient checking,
float32 for training).
"""

from __future__ import annotations

import numpy as np

LN_EPS = 1e-6


def keep_large_allocs_on_heap(threshold: int = 1 << 29) -> bool:
    """Raise glibc's mmap threshold so large buffers get reused off the heap.

    A training step reallocates the same multi-ten-MB attention buffers over
    and over; with the default threshold every one is a fresh mmap plus a
    page-fault pass. Returns False (no-op) when glibc is not available.
    """
    try:
        import ctypes

        libc = ctypes.CDLL("libc.so.6")
        return bool(libc.mallopt(-3, threshold))  # M_MMAP_THRESHOLD
    except Exception:
        return False


# ---------------------------------------------------------------------------
# linear


def linear_fwd(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = x @ w
    out += b
    return out


def linear_bwd(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    dx = dy @ w.T
    d_in, d_out = w.shape
    dw = x.reshape(-1, d_in).T @ dy.reshape(-1, d_out)
    db = dy.reshape(-1, d_out).sum(axis=0)
    return dx, dw, db


# ---------------------------------------------------------------------------
# layer norm (last axis)


def layernorm_fwd(x: np.ndarray):
    """Normalize the last axis to zero mean / unit variance; no affine."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat, (xhat, inv)


def layernorm_bwd(dy: np.ndarray, cache) -> np.ndarray:
    xhat, inv = cache
    d = xhat.shape[-1]
    s1 = dy.sum(axis=-1, keepdims=True)
    s2 = (dy * xhat).sum(axis=-1, keepdims=True)
    return inv * (dy - s1 / d - xhat * s2 / d)


def layernorm_affine_fwd(x: np.ndarray, g: np.ndarray, b: np.ndarray):
    xhat, cache = layernorm_fwd(x)
    return xhat * g + b, (cache, xhat, g)


def layernorm_affine_bwd(dy: np.ndarray, cache):
    ln_cache, xhat, g = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(axis=0)
    db = dy.reshape(-1, xhat.shape[-1]).sum(axis=0)
    dx = layernorm_bwd(dy * g, ln_cache)
    return dx, dg, db


# ---------------------------------------------------------------------------
# activations


_GELU_C = float(np.sqrt(2.0 / np.pi))  # np scalar would upcast f32 inputs
_GELU_A = 0.044715


def _gelu_inner(x: np.ndarray) -> np.ndarray:
    # x*x*x instead of x**3: the pow ufunc is an order of magnitude slower
    u = x * x
    u *= x
    u *= _GELU_A
    u += x
    u *= _GELU_C
    return u


def gelu_fwd(x: np.ndarray) -> np.ndarray:
    t = _gelu_inner(x)
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    t = _gelu_inner(x)
    np.tanh(t, out=t)
    du = x * x
    du *= 3.0 * _GELU_A
    du += 1.0
    du *= _GELU_C
    du *= x
    du *= 1.0 - t * t
    du += 1.0 + t
    du *= 0.5
    du *= dy
    return du


def silu_fwd(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_bwd(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# token modulation (adaLN): y = x * (1 + scale) + shift, per sample


def modulate_fwd(x: np.ndarray, shift: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return x * (1.0 + scale[:, None, :]) + shift[:, None, :]


def modulate_bwd(dy: np.ndarray, x: np.ndarray, scale: np.ndarray):
    dx = dy * (1.0 + scale[:, None, :])
    dscale = (dy * x).sum(axis=1)
    dshift = dy.sum(axis=1)
    return dx, dshift, dscale


# ---------------------------------------------------------------------------
# initialization


def xavier_uniform(rng: np.random.Generator, d_in: int, d_out: int, dtype=np.float64) -> np.ndarray:
    lim = np.sqrt(6.0 / (d_in + d_out))
    return rng.uniform(-lim, lim, size=(d_in, d_out)).astype(dtype)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay.

    Decay is applied only to matrices (ndim >= 2); biases, gains and
    embedding-like vectors are left undecayed.
    """

    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-4, warmup_steps: int = 0):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.warmup_steps = warmup_steps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        lr = self.lr
        if self.warmup_steps and self.t <= self.warmup_steps:
            lr = self.lr * self.t / self.warmup_steps
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for k, p in params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay and p.ndim >= 2:
                update = update + self.weight_decay * p
            p -= lr * update
