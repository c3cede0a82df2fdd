"""AdamW with decoupled weight decay, plus a reduce-on-plateau scheduler."""

import numpy as np

LR_FLOOR = 1e-8  # below this the learning rate is frozen


class AdamW:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01):
        # params: dict name -> Tensor; order fixed by sorted name for determinism
        self.params = dict(sorted(params.items()))
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / (1 - b1**self.t)
            v_hat = self.v[name] / (1 - b2**self.t)
            p.data = p.data - self.lr * (
                m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p.data
            )


class ReduceOnPlateau:
    """Halve lr after `patience` evals without `min_delta` improvement."""

    def __init__(self, optimizer, factor=0.5, patience=2, min_delta=1e-4):
        self.opt = optimizer
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = np.inf
        self.bad_evals = 0

    def step(self, metric):
        """Returns True if the lr was reduced on this eval."""
        if metric < self.best - self.min_delta:
            self.best = metric
            self.bad_evals = 0
            return False
        self.bad_evals += 1
        if self.bad_evals > self.patience:
            if self.opt.lr * self.factor >= LR_FLOOR:
                self.opt.lr *= self.factor
            self.bad_evals = 0
            return True
        return False
