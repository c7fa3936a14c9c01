"""Adam with bias correction."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .nn import Parameter


class Adam:
    """Adam over an ordered list of named parameters.

    State is kept per name so it can be written to and restored from a
    checkpoint without depending on object identity.
    """

    def __init__(self, named_params: Sequence[tuple[str, Parameter]], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError(f"lr must be positive, got {lr}")
        self.params = list(named_params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.data.shape}")
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (self.lr * update).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name, p in self.params:
            for key, store in (("m", self.m), ("v", self.v)):
                arr = arrays[f"adam.{key}.{name}"]
                if arr.shape != p.data.shape:
                    raise ValueError(f"optimizer state {key} for {name}: shape {arr.shape} != {p.data.shape}")
                store[name] = np.array(arr, dtype=p.data.dtype)
        self.t = int(t)
