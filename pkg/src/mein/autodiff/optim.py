from __future__ import annotations

from typing import Iterable

import numpy as np

from .tensor import GraphError, Tensor


class Adam:
    """Bias-corrected Adam with per-step exponential learning-rate decay.

    The rate used on step ``t`` (counting from zero) is ``lr * decay**t``.
    ``clip_norm`` rescales the global gradient norm when set; off by default.
    Gradients are cleared after every step.
    """

    def __init__(
        self,
        params: Iterable[Tensor],
        lr: float = 1e-3,
        decay: float = 0.9998,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        clip_norm: float | None = None,
    ):
        self.params = list(params)
        if not self.params:
            raise ValueError("Adam needs at least one parameter")
        if lr <= 0 or not 0 < decay <= 1:
            raise ValueError(f"invalid lr={lr} or decay={decay}")
        self.lr = lr
        self.decay = decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    @property
    def current_lr(self) -> float:
        return self.lr * self.decay ** self.t

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise GraphError(f"no gradient on trainable parameter {p!r}; is the graph detached?")
        grads = [p.grad for p in self.params]
        if self.clip_norm is not None:
            norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads)))
            if norm > self.clip_norm:
                grads = [g * (self.clip_norm / norm) for g in grads]
        lr = self.current_lr
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            update = (lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.dtype, copy=False)
            p.grad = None
