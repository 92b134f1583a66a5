"""Small numpy MLP with hand-written reverse mode, masked softmax helpers and Adam."""

from __future__ import annotations

import numpy as np


class MLP:
    """Fully connected tanh network with a linear output layer.

    Parameters live in ``self.params`` as a flat list ``[W0, b0, W1, b1, ...]``
    so optimisers and checkpoints can treat them uniformly.
    """

    def __init__(self, sizes, rng: np.random.Generator, out_scale: float = 1.0):
        self.sizes = tuple(int(s) for s in sizes)
        self.params = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = np.sqrt(1.0 / fan_in) * (out_scale if i == n_layers - 1 else 1.0)
            self.params.append(rng.normal(0.0, scale, (fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    def forward(self, x):
        acts = [x]
        h = x
        n = len(self.params) // 2
        for i in range(n):
            z = h @ self.params[2 * i] + self.params[2 * i + 1]
            h = np.tanh(z) if i < n - 1 else z
            acts.append(h)
        return h, acts

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, acts, dout):
        """Gradients of ``sum(dout * output)`` w.r.t. every parameter."""
        grads = [None] * len(self.params)
        n = len(self.params) // 2
        d = dout
        for i in reversed(range(n)):
            h_in = acts[i]
            grads[2 * i] = h_in.T @ d
            grads[2 * i + 1] = d.sum(axis=0)
            if i > 0:
                d = (d @ self.params[2 * i].T) * (1.0 - acts[i] ** 2)
        return grads

    def copy_params(self):
        return [p.copy() for p in self.params]

    def set_params(self, values):
        for p, v in zip(self.params, values):
            p[...] = v


def masked_log_softmax(logits, mask):
    """Log-probabilities with invalid actions at ``-inf`` (exactly zero probability)."""
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    shifted = z - zmax
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    return shifted - lse


class Adam:
    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self):
        return {"t": self.t, "m": self.m, "v": self.v}
