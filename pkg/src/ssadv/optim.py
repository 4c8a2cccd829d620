"""SGD with heavy-ball momentum and decoupled-per-parameter weight decay."""
from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np


def sgd_momentum_step(
    params: list[np.ndarray],
    grads: list[np.ndarray | None],
    velocities: list[np.ndarray | None],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float | list[float] = 0.0,
) -> list[np.ndarray]:
    """One in-place update of ``params``.

    ``v <- momentum * v + grad + weight_decay * param`` then
    ``param <- param - lr * v``. A ``None`` velocity is treated as zeros and
    a ``None`` gradient as a zero gradient. Returns the velocity buffers.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if np.isscalar(weight_decay):
        weight_decay = [weight_decay] * len(params)
    out = []
    for p, g, v, wd in zip(params, grads, velocities, weight_decay):
        step = np.zeros_like(p) if g is None else np.asarray(g, dtype=p.dtype).copy()
        if wd:
            step += p.dtype.type(wd) * p
        if v is None:
            v = step
        else:
            v *= p.dtype.type(momentum)
            v += step
        p -= p.dtype.type(lr) * v
        out.append(v)
    return out


class SGD:
    """Stateful wrapper keeping one velocity buffer per named parameter."""

    def __init__(self, params: Mapping, momentum: float = 0.9, weight_decay: float = 5e-4,
                 decay: Iterable[str] = ()):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay = set(decay)
        self.velocity: dict[str, np.ndarray] = {}

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def step(self, lr: float) -> None:
        names = list(self.params)
        tensors = [self.params[n] for n in names]
        vel = sgd_momentum_step(
            [t.data for t in tensors],
            [t.grad for t in tensors],
            [self.velocity.get(n) for n in names],
            lr,
            self.momentum,
            [self.weight_decay if n in self.decay else 0.0 for n in names],
        )
        self.velocity = dict(zip(names, vel))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {f"velocity/{k}": v for k, v in self.velocity.items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        self.velocity = {
            k.split("/", 1)[1]: np.array(v, dtype=np.float32)
            for k, v in state.items()
            if k.startswith("velocity/")
        }
