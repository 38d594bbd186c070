"""Small fully connected nets with hand-written backprop, plus SGD and Adam."""

from __future__ import annotations

import math

import numpy as np


class MLP:
    """tanh hidden layers; output is linear or ``scale * tanh``.

    ``params`` is a flat list ``[W1, b1, W2, b2, ...]`` with ``W`` shaped
    (fan_in, fan_out), so a batch ``x`` of shape (B, fan_in) maps to
    ``x @ W + b``.
    """

    def __init__(self, sizes, out_scale: float | None = None, rng=None, params=None,
                 last_init: float | None = None):
        self.sizes = tuple(int(s) for s in sizes)
        self.out_scale = out_scale
        if params is not None:
            self.params = [np.array(p, dtype=float) for p in params]
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            self.params = []
            pairs = list(zip(self.sizes[:-1], self.sizes[1:]))
            for k, (fan_in, fan_out) in enumerate(pairs):
                bound = 1.0 / math.sqrt(fan_in)
                if last_init is not None and k == len(pairs) - 1:
                    bound = last_init
                self.params.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
                self.params.append(rng.uniform(-bound, bound, size=fan_out))
        self._check()

    def _check(self):
        if len(self.params) != 2 * (len(self.sizes) - 1):
            raise ValueError("parameter list does not match layer sizes")
        for k, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            if self.params[2 * k].shape != (a, b) or self.params[2 * k + 1].shape != (b,):
                raise ValueError(f"layer {k} has the wrong shape")

    @property
    def n_layers(self) -> int:
        return len(self.sizes) - 1

    def forward(self, x, cache: bool = False):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        acts = [x]
        h = x
        for k in range(self.n_layers):
            z = h @ self.params[2 * k] + self.params[2 * k + 1]
            last = k == self.n_layers - 1
            if not last:
                h = np.tanh(z)
            elif self.out_scale is not None:
                h = self.out_scale * np.tanh(z)
            else:
                h = z
            acts.append(h)
        return (h, acts) if cache else h

    __call__ = forward

    def backward(self, acts, grad_out):
        """Gradients of ``sum(grad_out * output)`` w.r.t. params and input."""
        g = np.asarray(grad_out, dtype=float)
        grads = [None] * len(self.params)
        for k in reversed(range(self.n_layers)):
            out = acts[k + 1]
            if k == self.n_layers - 1:
                if self.out_scale is not None:
                    g = g * (self.out_scale - out * out / self.out_scale)
            else:
                g = g * (1.0 - out * out)
            grads[2 * k] = acts[k].T @ g
            grads[2 * k + 1] = g.sum(axis=0)
            g = g @ self.params[2 * k].T
        return grads, g

    def copy(self) -> "MLP":
        return MLP(self.sizes, self.out_scale, params=[p.copy() for p in self.params])

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "out_scale": self.out_scale,
            "params": [{"shape": list(p.shape), "data": p.ravel().tolist()} for p in self.params],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MLP":
        params = [np.asarray(p["data"], dtype=float).reshape(p["shape"]) for p in d["params"]]
        return cls(d["sizes"], d.get("out_scale"), params=params)

    def finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params)


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, lr: float):
    if name == "sgd":
        return SGD(lr)
    if name == "adam":
        return Adam(lr)
    raise ValueError(f"unknown optimizer {name!r}")
