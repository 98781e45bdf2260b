"""Adam with bias correction and the cosine annealing schedule."""

from __future__ import annotations

import math

import numpy as np


def adam_update(p, g, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new_p, new_m, new_v).

    Pure function of its inputs: neither the parameter nor the gradient
    buffer is mutated.
    """
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * (g * g)
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return p - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a module's named parameters.

    Moment buffers are keyed by parameter name; ``step`` skips parameters
    whose grad is None. Weight decay, when nonzero, is decoupled.
    """

    def __init__(self, module, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.params = list(module.named_parameters())
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.state = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in self.params
        }

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        for name, p in self.params:
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ValueError(
                    f"gradient shape {p.grad.shape} != parameter shape {p.data.shape} ({name})"
                )
            m, v = self.state[name]
            new_p, m, v = adam_update(
                p.data, p.grad, m, v, self.t, lr, self.beta1, self.beta2, self.eps
            )
            if self.weight_decay:
                new_p = new_p - lr * self.weight_decay * p.data
            self.state[name] = (m, v)
            p.data = new_p


def cosine_lr(step, total_steps, lr_max, lr_min=0.0):
    """lr_min + 0.5 (lr_max - lr_min) (1 + cos(pi step / total))."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))
