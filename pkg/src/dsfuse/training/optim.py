"""In-place SGD and Adam over dicts of numpy parameters."""

from __future__ import annotations

import numpy as np

from ..errors import DomainError, UsageError


class SGD:
    name = "sgd"

    def __init__(self, lr: float = 1e-3):
        if lr < 0:
            raise DomainError(f"learning rate must be non-negative, got {lr}")
        self.lr = lr
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for k, p in params.items():
            p -= self.lr * grads[k]

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        return {"name": self.name, "lr": self.lr, "t": self.t}, {}

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(meta["t"])


class Adam:
    """Adam with bias-corrected moments; state kept in the parameter dtype."""

    name = "adam"

    def __init__(self, lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8):
        if lr < 0:
            raise DomainError(f"learning rate must be non-negative, got {lr}")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {f"m/{k}": a for k, a in self.m.items()}
        arrays.update({f"v/{k}": a for k, a in self.v.items()})
        meta = {"name": self.name, "lr": self.lr, "t": self.t, "betas": [self.beta1, self.beta2],
                "eps": self.eps}
        return meta, arrays

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.t = int(meta["t"])
        self.m = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("m/")}
        self.v = {k[2:]: a.copy() for k, a in arrays.items() if k.startswith("v/")}


def make_optimizer(name: str, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    if name == "adam":
        return Adam(lr, tuple(betas), eps)
    if name == "sgd":
        return SGD(lr)
    raise UsageError(f"unknown optimizer {name!r}")
