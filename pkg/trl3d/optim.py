"""
SGD with heavy-ball momentum and Adam, plus global gradient-norm clipping.
"""

from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import GradientTapeError
from .tensor import Tensor


class SGD:
    """Applies ``v <- momentum*v + grad; p <- p - lr*v`` and clears the grads."""

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0) -> None:
        if lr < 0.0 or not 0.0 <= momentum < 1.0:
            raise ValueError(f"invalid optimizer settings lr={lr} momentum={momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self._velocity: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise GradientTapeError(f"{len(missing)} parameters have no gradient; call backward() first")
        for p in self.params:
            assert p.grad is not None
            velocity = self._velocity.get(id(p))
            velocity = p.grad.copy() if velocity is None else self.momentum * velocity + p.grad
            self._velocity[id(p)] = velocity
            p.data = p.data - self.lr * velocity
            p.grad = None


class Adam:
    """
    Adam with bias-corrected moment estimates; each coordinate moves by at most about ``lr`` per step.
    """

    def __init__(
        self, params: Sequence[Tensor], lr: float, betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8
    ) -> None:
        if lr < 0.0 or not all(0.0 <= b < 1.0 for b in betas) or eps <= 0.0:
            raise ValueError(f"invalid optimizer settings lr={lr} betas={betas} eps={eps}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.steps = 0
        self._first: Dict[int, np.ndarray] = {}
        self._second: Dict[int, np.ndarray] = {}

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise GradientTapeError(f"{len(missing)} parameters have no gradient; call backward() first")
        self.steps += 1
        beta1, beta2 = self.betas
        correction1 = 1.0 - beta1**self.steps
        correction2 = 1.0 - beta2**self.steps
        for p in self.params:
            assert p.grad is not None
            first = beta1 * self._first.get(id(p), np.zeros_like(p.data)) + (1.0 - beta1) * p.grad
            second = beta2 * self._second.get(id(p), np.zeros_like(p.data)) + (1.0 - beta2) * p.grad * p.grad
            self._first[id(p)] = first
            self._second[id(p)] = second
            p.data = p.data - self.lr * (first / correction1) / (np.sqrt(second / correction2) + self.eps)
            p.grad = None


Optimizer = Union[SGD, Adam]
OPTIMIZERS = ("sgd", "adam")


def make_optimizer(kind: str, params: Sequence[Tensor], lr: float, momentum: float = 0.0) -> Optimizer:
    """``momentum`` only applies to SGD; Adam keeps its default betas."""
    if kind == "sgd":
        return SGD(params, lr, momentum)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}, expected one of {OPTIMIZERS}")


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    """
    Rescale gradients in place so their global L2 norm is at most ``max_norm``.

    Args:
        params: Tensors whose ``grad`` is filled by a backward pass; missing grads are skipped
        max_norm: Largest allowed global norm; zero or less leaves the gradients untouched

    Returns:
        The global norm before clipping
    """
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / (total + 1e-6)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float, optimizer: Optional[SGD] = None) -> SGD:
    """One update; pass the returned optimizer back in to carry momentum."""
    optimizer = optimizer or SGD(params, lr, momentum)
    optimizer.step()
    return optimizer
