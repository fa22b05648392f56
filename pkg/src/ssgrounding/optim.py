"""Adam and a plateau-based learning-rate schedule over dicts of numpy arrays."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of every parameter that has a gradient."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k in sorted(grads):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[k] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict:
        return {"lr": self.lr, "t": self.t, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state["lr"])
        self.t = int(state["t"])
        self.m = {k: np.array(v) for k, v in state["m"].items()}
        self.v = {k: np.array(v) for k, v in state["v"].items()}


class ReduceLROnPlateau:
    """Multiply the optimizer's lr by ``factor`` once the monitored loss has not
    improved (relative threshold) for more than ``patience`` steps."""

    def __init__(self, optimizer: Adam, factor: float = 0.5, patience: int = 100,
                 threshold: float = 1e-4, min_lr: float = 0.0):
        if not 0 < factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = np.inf
        self.best_step = 0

    def step(self, metric: float, step: int) -> bool:
        """Report the metric observed at ``step``; returns True if lr was reduced."""
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.best_step = step
            return False
        if step - self.best_step > self.patience:
            new_lr = max(self.optimizer.lr * self.factor, self.min_lr)
            reduced = new_lr < self.optimizer.lr
            self.optimizer.lr = new_lr
            self.best_step = step
            return reduced
        return False

    def state_dict(self) -> dict:
        return {"best": float(self.best), "best_step": int(self.best_step)}

    def load_state_dict(self, state: dict) -> None:
        self.best = float(state["best"])
        self.best_step = int(state["best_step"])
