"""AdamW with decoupled weight decay, plus the cosine learning-rate rule."""

from __future__ import annotations

import numpy as np


class AdamW:
    def __init__(self, named_params, lr=6e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.named = list(named_params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def zero_grad(self):
        for _, p in self.named:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, p in self.named:
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)

    def state_dict(self):
        return {"step": self.step_count,
                "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load_state_dict(self, state):
        self.step_count = int(state.get("step", 0))
        for k, a in state.get("m", {}).items():
            if k in self.m:
                self.m[k] = np.asarray(a, dtype=self.m[k].dtype).reshape(self.m[k].shape)
        for k, a in state.get("v", {}).items():
            if k in self.v:
                self.v[k] = np.asarray(a, dtype=self.v[k].dtype).reshape(self.v[k].shape)


def cosine_lr(base_lr, step, total_steps):
    """Cosine decay from base_lr at step 0 to ~0 at the final step."""
    if total_steps <= 1:
        return base_lr
    t = min(max(step, 0), total_steps - 1) / (total_steps - 1)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * t))
