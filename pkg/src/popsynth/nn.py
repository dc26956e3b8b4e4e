"""Minimal dense-network layers with hand-written backward passes."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _adam_kernel(p, g, m, v, step, b1, b2, eps, scale):
    for i in range(p.size):
        gi = g[i] * scale
        m[i] = b1 * m[i] + (1.0 - b1) * gi
        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi
        p[i] -= step * m[i] / (np.sqrt(v[i]) + eps)


class Layer:
    """A layer holds ``params`` and matching ``grads`` dicts of arrays.

    ``backward`` overwrites ``grads`` with the gradient of the most recent
    ``forward`` call; gradients are not accumulated across calls.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x, train=True):
        raise NotImplementedError

    def backward(self, g):
        raise NotImplementedError

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Dense(Layer):
    def __init__(self, n_in, n_out, rng):
        super().__init__()
        bound = 1.0 / np.sqrt(n_in)
        self.params["W"] = rng.uniform(-bound, bound, size=(n_in, n_out))
        self.params["b"] = rng.uniform(-bound, bound, size=n_out)
        self.zero_grad()

    def forward(self, x, train=True):
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, g):
        self.grads["W"] = self._x.T @ g
        self.grads["b"] = g.sum(axis=0)
        return g @ self.params["W"].T


class BatchNorm(Layer):
    """Batch normalisation; inference mode uses running statistics."""

    def __init__(self, n, momentum=0.1, eps=1e-5):
        super().__init__()
        self.params["gamma"] = np.ones(n)
        self.params["beta"] = np.zeros(n)
        self.running_mean = np.zeros(n)
        self.running_var = np.ones(n)
        self.momentum = momentum
        self.eps = eps
        self.zero_grad()

    def forward(self, x, train=True):
        if train:
            mu = x.mean(axis=0)
            var = x.var(axis=0)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu
            self.running_var = (1 - m) * self.running_var + m * var
        else:
            mu, var = self.running_mean, self.running_var
        self._inv = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mu) * self._inv
        self._train = train
        return self.params["gamma"] * self._xhat + self.params["beta"]

    def backward(self, g):
        xhat, inv = self._xhat, self._inv
        self.grads["gamma"] = (g * xhat).sum(axis=0)
        self.grads["beta"] = g.sum(axis=0)
        gx = g * self.params["gamma"]
        if not self._train:
            return gx * inv
        return inv * (gx - gx.mean(axis=0) - xhat * (gx * xhat).mean(axis=0))


class ReLU(Layer):
    def forward(self, x, train=True):
        self._mask = x > 0
        return x * self._mask

    def backward(self, g):
        return g * self._mask


class LeakyReLU(Layer):
    def __init__(self, slope=0.2):
        super().__init__()
        self.slope = slope

    def forward(self, x, train=True):
        self._scale = np.where(x > 0, 1.0, self.slope)
        return x * self._scale

    def backward(self, g):
        return g * self._scale


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x, train=True):
        for layer in self.layers:
            x = layer.forward(x, train)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def named_parameters(self):
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                yield f"{i}.{k}", layer.params, layer.grads, k

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{i}.{k}"] = v
            if isinstance(layer, BatchNorm):
                out[f"{i}.running_mean"] = layer.running_mean
                out[f"{i}.running_var"] = layer.running_var
        return out

    def load_state_dict(self, state):
        for i, layer in enumerate(self.layers):
            for k in layer.params:
                layer.params[k] = np.array(state[f"{i}.{k}"], dtype=float)
            if isinstance(layer, BatchNorm):
                layer.running_mean = np.array(state[f"{i}.running_mean"], dtype=float)
                layer.running_var = np.array(state[f"{i}.running_var"], dtype=float)
        self.zero_grad()


class Adam:
    """Adam over a fixed list of ``(params_dict, grads_dict, key)`` slots.

    Arrays in ``params`` are updated in place and must be C-contiguous.
    ``clip_norm`` rescales the joint gradient when its norm exceeds it.
    """

    def __init__(self, slots, lr=2e-4, betas=(0.5, 0.9), eps=1e-8, clip_norm=None):
        self.slots = list(slots)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros(p[k].size) for p, _, k in self.slots]
        self.v = [np.zeros(p[k].size) for p, _, k in self.slots]

    def step(self):
        self.t += 1
        step = self.lr * np.sqrt(1.0 - self.b2 ** self.t) / (1.0 - self.b1 ** self.t)
        scale = 1.0
        if self.clip_norm is not None:
            norm = np.sqrt(sum(float(np.vdot(g[k], g[k])) for _, g, k in self.slots))
            scale = min(1.0, self.clip_norm / (norm + 1e-12))
        for (params, grads, k), m, v in zip(self.slots, self.m, self.v):
            p = params[k]
            if not p.flags.c_contiguous:
                raise ValueError(f"parameter {k!r} is not contiguous")
            g = np.ascontiguousarray(grads[k], dtype=float)
            _adam_kernel(p.reshape(-1), g.reshape(-1), m, v, step,
                         self.b1, self.b2, self.eps, scale)


def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=float)))


def log_softmax(x, axis=-1):
    m = x.max(axis=axis, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=axis, keepdims=True))
