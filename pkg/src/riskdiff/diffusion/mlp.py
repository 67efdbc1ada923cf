"""Fully connected network with hand-written backward pass and Adam.

Adam update for parameter ``w`` with gradient ``g`` at step ``k``::

    m <- b1 * m + (1 - b1) * g
    v <- b2 * v + (1 - b2) * g**2
    w <- w - lr * (m / (1 - b1**k)) / (sqrt(v / (1 - b2**k)) + eps)
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


class MLP:
    """``Linear -> SiLU -> ... -> Linear``; parameters live in ``self.params``."""

    def __init__(self, dims, rng=None, params=None):
        self.dims = [int(d) for d in dims]
        if params is not None:
            self.params = [np.asarray(p, dtype=float) for p in params]
            return
        rng = np.random.default_rng(rng)
        self.params = []
        n_layers = len(self.dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.dims[:-1], self.dims[1:])):
            bound = np.sqrt(6.0 / fan_in) if i < n_layers - 1 else np.sqrt(1.0 / fan_in)
            self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.dims) - 1

    def forward(self, x, keep=False):
        """Returns the output, plus the pre-activation cache when ``keep``."""
        cache = []
        h = x
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if keep:
                cache.append((h, z))
            h = silu(z) if i < self.n_layers - 1 else z
        return (h, cache) if keep else h

    __call__ = forward

    def backward(self, cache, dout):
        """Gradients of ``sum(dout * out)`` w.r.t. every parameter, in ``params`` order."""
        grads = [None] * len(self.params)
        g = dout
        for i in reversed(range(self.n_layers)):
            h, z = cache[i]
            if i < self.n_layers - 1:
                g = g * silu_grad(z)
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.params[2 * i].T
        return grads


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.k = 0

    def step(self, params, grads):
        self.k += 1
        c1 = 1.0 - self.b1**self.k
        c2 = 1.0 - self.b2**self.k
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
