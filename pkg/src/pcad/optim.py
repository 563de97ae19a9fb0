"""Adam optimizer and a central-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward
from .errors import ContractError


@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update. Returns new arrays; inputs are untouched."""
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    b1, b2 = betas
    if not state.m:
        state = AdamState(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])
    t = state.step + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(t, new_m, new_v)


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        new, self.state = adam_step(
            [p.data for p in self.params], grads, self.state, self.lr, self.betas, self.eps
        )
        for p, value in zip(self.params, new):
            p.data = value

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-4,
    n_samples: int = 100,
    seed: int = 0,
) -> float:
    """Maximum relative error between backprop and central differences.

    ``f`` must rebuild the graph from the current values of ``params`` on
    every call.  Up to ``n_samples`` coordinates are drawn uniformly across
    all parameters (every coordinate when there are fewer).  The relative
    error uses ``max(|analytic|, |numeric|, 1e-8)`` as denominator.
    """
    for p in params:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]

    sizes = np.array([p.data.size for p in params])
    total = int(sizes.sum())
    rng = np.random.default_rng(seed)
    if total <= n_samples:
        flat = np.arange(total)
    else:
        flat = np.sort(rng.choice(total, size=n_samples, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for k in flat:
        which = int(np.searchsorted(offsets, k, side="right") - 1)
        idx = int(k - offsets[which])
        p = params[which]
        view = p.data.reshape(-1)
        orig = view[idx]
        view[idx] = orig + eps
        fp = float(f().data)
        view[idx] = orig - eps
        fm = float(f().data)
        view[idx] = orig
        numeric = (fp - fm) / (2.0 * eps)
        a = float(analytic[which].reshape(-1)[idx])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
