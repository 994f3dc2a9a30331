"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from retarget.nn.tensor import Tensor


class Adam:
    def __init__(self, params: list[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self._scratch = [np.empty_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            # A NaN or +-Inf anywhere makes the sum non-finite.
            if not np.isfinite(np.sum(g, dtype=np.float64)):
                raise ValueError("non-finite gradient in Adam step; training aborted")
            m, v, tmp = self.m[i], self.v[i], self._scratch[i]
            # In-place moment updates through one scratch buffer: these
            # arrays dominate memory traffic at training time.
            np.multiply(m, self.beta1, out=m)
            np.multiply(g, 1.0 - self.beta1, out=tmp)
            m += tmp
            np.multiply(v, self.beta2, out=v)
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / np.sqrt(b2t)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / b1t
            np.subtract(p.data, tmp, out=p.data)
