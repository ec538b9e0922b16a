"""AdamW with a cosine-annealed learning rate."""

import math

import numpy as np

# parameters that must stay non-negative after every update
_NONNEG = ("post.mu_R", "post.mu_E")


def cosine_lr(step, total, base_lr, min_lr=0.0):
    if total <= 1:
        return base_lr
    t = min(step, total - 1) / (total - 1)
    return min_lr + 0.5 * (base_lr - min_lr) * (1 + math.cos(math.pi * t))


class AdamW:
    """Decoupled weight decay, applied only to tensors with ndim >= 2."""

    def __init__(self, params, lr=1e-4, weight_decay=1e-2, total_steps=1,
                 betas=(0.9, 0.999), eps=1e-8):
        self.base_lr = lr
        self.weight_decay = weight_decay
        self.total_steps = total_steps
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, params, grads):
        """Update ``params`` in place; returns the learning rate used."""
        lr = cosine_lr(self.t, self.total_steps, self.base_lr)
        self.t += 1
        if lr == 0.0:
            return lr
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, w in params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            upd = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if w.ndim >= 2 and self.weight_decay:
                upd = upd + lr * self.weight_decay * w
            w -= upd.astype(w.dtype)
            if k.endswith(_NONNEG):
                np.maximum(w, 0, out=w)
        return lr
