"""Adam, as a pure function and as a stateful wrapper over a parameter list."""
from __future__ import annotations

import numpy as np

__all__ = ["adam_step", "Adam"]


def adam_step(param, grad, m, v, t: int, lr: float = 3e-4, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update; returns ``(param, m, v)`` as new arrays."""
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, params, lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        for k, p in enumerate(self.params):
            if p.grad is None:
                continue
            new, self.m[k], self.v[k] = adam_step(p.data, p.grad, self.m[k], self.v[k], self.t,
                                                  self.lr, b1, b2, self.eps)
            p.data = new.astype(p.data.dtype, copy=False)

    def state_dict(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for k in range(len(self.params)):
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"][0])
        for k in range(len(self.params)):
            self.m[k] = np.array(state[f"m.{k}"], dtype=self.params[k].data.dtype)
            self.v[k] = np.array(state[f"v.{k}"], dtype=self.params[k].data.dtype)
