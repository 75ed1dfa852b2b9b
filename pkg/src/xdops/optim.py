"""Optimizers (SGD, momentum, Adam) and learning-rate schedules.

Complex parameters follow the same real-pair convention as the autodiff
module: the real and imaginary planes are updated as two independent real
parameters.  For SGD/momentum this coincides with complex arithmetic; Adam
keeps separate second-moment accumulators for the two planes.
"""

from __future__ import annotations

import math
from typing import Callable, Dict, Iterable, List, Mapping, Optional

import numpy as np

from .autodiff import Tensor

__all__ = [
    "OptimError",
    "sgd_step",
    "momentum_step",
    "adam_step",
    "SGD",
    "Momentum",
    "Adam",
    "make_optimizer",
    "make_schedule",
]


class OptimError(RuntimeError):
    pass


def _check_grads(params: Iterable[Tensor], grads: Mapping[Tensor, np.ndarray]) -> List[np.ndarray]:
    """Resolve and validate one gradient per parameter before mutating anything."""
    out = []
    for p in params:
        g = grads.get(p)
        if g is None:
            g = np.zeros_like(p.data)
        if not np.all(np.isfinite(g.real)) or (np.iscomplexobj(g) and not np.all(np.isfinite(g.imag))):
            raise OptimError(f"non-finite gradient for parameter {p.name or id(p)}; step rejected")
        out.append(g)
    return out


def sgd_step(params: List[Tensor], grads: Mapping[Tensor, np.ndarray], lr: float) -> None:
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    gs = _check_grads(params, grads)
    for p, g in zip(params, gs):
        p.data = p.data - lr * g.astype(p.data.dtype)


def momentum_step(params: List[Tensor], grads: Mapping[Tensor, np.ndarray], lr: float,
                  mu: float, state: Dict[int, np.ndarray]) -> None:
    """Heavy-ball momentum: v <- mu*v + g; p <- p - lr*v."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    gs = _check_grads(params, grads)
    for p, g in zip(params, gs):
        v = state.get(id(p))
        if v is None:
            v = np.zeros_like(p.data)
        v = mu * v + g.astype(p.data.dtype)
        state[id(p)] = v
        p.data = p.data - lr * v


def adam_step(params: List[Tensor], grads: Mapping[Tensor, np.ndarray], lr: float,
              beta1: float, beta2: float, eps: float, state: Dict) -> None:
    """Adam with bias correction; per-plane second moments for complex params."""
    if lr < 0:
        raise ValueError("lr must be nonnegative")
    gs = _check_grads(params, grads)
    t = state.get("t", 0) + 1
    state["t"] = t
    for p, g in zip(params, gs):
        key = id(p)
        if key not in state:
            state[key] = (np.zeros_like(p.data),
                          np.zeros(p.data.shape + (2,), dtype=np.float64)
                          if np.iscomplexobj(p.data) else np.zeros_like(p.data))
        m, v = state[key]
        g = g.astype(p.data.dtype)
        m = beta1 * m + (1 - beta1) * g
        if np.iscomplexobj(p.data):
            g2 = np.stack([g.real * g.real, g.imag * g.imag], axis=-1)
            v = beta2 * v + (1 - beta2) * g2
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            upd = (mhat.real / (np.sqrt(vhat[..., 0]) + eps)
                   + 1j * mhat.imag / (np.sqrt(vhat[..., 1]) + eps))
        else:
            v = beta2 * v + (1 - beta2) * (g * g)
            mhat = m / (1 - beta1 ** t)
            vhat = v / (1 - beta2 ** t)
            upd = mhat / (np.sqrt(vhat) + eps)
        state[key] = (m, v)
        p.data = p.data - lr * upd


class _Optimizer:
    def __init__(self, params: List[Tensor], lr: float):
        self.params = list(params)
        self.base_lr = float(lr)
        self.lr = float(lr)

    def set_lr_factor(self, factor: float) -> None:
        self.lr = self.base_lr * factor

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> None:  # pragma: no cover
        raise NotImplementedError


class SGD(_Optimizer):
    def step(self, grads):
        sgd_step(self.params, grads, self.lr)


class Momentum(_Optimizer):
    def __init__(self, params, lr, mu: float = 0.9):
        super().__init__(params, lr)
        self.mu = float(mu)
        self.state: Dict[int, np.ndarray] = {}

    def step(self, grads):
        momentum_step(self.params, grads, self.lr, self.mu, self.state)


class Adam(_Optimizer):
    def __init__(self, params, lr, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = float(beta1), float(beta2), float(eps)
        self.state: Dict = {}

    def step(self, grads):
        adam_step(self.params, grads, self.lr, self.beta1, self.beta2, self.eps, self.state)


def make_optimizer(spec: Mapping, params: List[Tensor]) -> _Optimizer:
    """Build an optimizer from a config mapping {algo, lr, [momentum|betas]}."""
    algo = str(spec.get("algo", "sgd")).lower()
    lr = float(spec.get("lr", 0.0))
    if algo == "sgd":
        return SGD(params, lr)
    if algo == "momentum":
        return Momentum(params, lr, mu=float(spec.get("momentum", 0.9)))
    if algo == "adam":
        return Adam(params, lr,
                    beta1=float(spec.get("beta1", 0.9)),
                    beta2=float(spec.get("beta2", 0.999)),
                    eps=float(spec.get("eps", 1e-8)))
    raise ValueError(f"unknown optimizer algo {algo!r}")


def make_schedule(spec) -> Callable[[int, int], float]:
    """Return factor(epoch, total_epochs) for a schedule spec.

    Supported kinds: ``constant``; ``cosine`` (annealed to 0 over the run);
    ``step`` with {milestones: [...], gamma: x}.
    """
    if spec is None:
        spec = {"kind": "constant"}
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = str(spec.get("kind", "constant")).lower()
    if kind == "constant":
        return lambda epoch, total: 1.0
    if kind == "cosine":
        def cosine(epoch, total):
            if total <= 1:
                return 1.0
            return 0.5 * (1.0 + math.cos(math.pi * epoch / (total - 1)))
        return cosine
    if kind == "step":
        milestones = sorted(int(m) for m in spec.get("milestones", []))
        gamma = float(spec.get("gamma", 0.1))

        def stepped(epoch, total):
            return gamma ** sum(1 for m in milestones if epoch >= m)
        return stepped
    raise ValueError(f"unknown schedule kind {kind!r}")
