"""PGD adversaries with an optional self-supervised term in the attack loss.

Images live in ``[0, 1]``. The feasible set is the closed ``l_p`` ball of
radius ``epsilon`` around the clean image intersected with the pixel box.
``linf`` steps follow ``alpha * sign(grad)``; ``l2`` steps follow the
per-sample unit-norm gradient.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T

NORMS = ("linf", "l2")


@dataclass
class AttackConfig:
    norm: str = "linf"
    epsilon: float = 8 / 255
    alpha: float = 2 / 255
    steps: int = 10
    random_start: bool = True
    use_ss_loss: bool = False
    lambda2: float = 1.0
    attack_ss: bool = False
    targeted: bool = False

    def validate(self) -> None:
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}, got {self.norm!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be non-negative, got {self.steps}")
        if self.steps > 0 and not self.alpha > 0:
            raise ValueError(f"alpha must be positive when steps > 0, got {self.alpha}")
        if self.lambda2 < 0:
            raise ValueError(f"lambda2 must be non-negative, got {self.lambda2}")
        if self.targeted:
            raise ValueError("targeted attacks are not supported")

    def to_dict(self) -> dict:
        return asdict(self)


def default_alpha(norm: str, epsilon: float, steps: int) -> float:
    """Step size rule: ``2 * eps / steps`` for l2, ``2/255`` for linf."""
    if norm == "l2":
        return 2.0 * epsilon / max(steps, 1)
    return 2.0 / 255.0


@dataclass
class AdvBatch:
    x_adv: np.ndarray
    x_ss_adv: np.ndarray | None = None
    losses: np.ndarray | None = None


def _flat_norm(a: np.ndarray) -> np.ndarray:
    return np.sqrt((a.reshape(len(a), -1) ** 2).sum(axis=1))


def _per_sample(v: np.ndarray, ndim: int) -> np.ndarray:
    return v.reshape((-1,) + (1,) * (ndim - 1))


def sample_ball(shape, epsilon: float, norm: str, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw from the ``epsilon`` ball, one per leading index."""
    if norm == "linf":
        return rng.uniform(-epsilon, epsilon, size=shape)
    d = int(np.prod(shape[1:]))
    g = rng.standard_normal(shape)
    g /= _per_sample(np.maximum(_flat_norm(g), 1e-12), len(shape))
    r = epsilon * rng.uniform(size=shape[0]) ** (1.0 / d)
    return g * _per_sample(r, len(shape))


def random_init(X: np.ndarray, epsilon: float, norm: str, rng: np.random.Generator) -> np.ndarray:
    if epsilon == 0:
        return np.array(X, copy=True)
    delta = sample_ball(X.shape, epsilon, norm, rng)
    return np.clip(X + delta, 0.0, 1.0).astype(X.dtype)


def project(delta: np.ndarray, epsilon: float, norm: str) -> np.ndarray:
    """Nearest point of the ``epsilon`` ball, per sample."""
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    n = _flat_norm(delta)
    factor = np.where(n > epsilon, epsilon / np.maximum(n, 1e-30), 1.0)
    return delta * _per_sample(factor, delta.ndim)


def pgd_step(Xk, grad, alpha, norm, X_orig, epsilon) -> np.ndarray:
    """Ascent step, projection onto the ball around ``X_orig``, pixel clamp."""
    if grad.shape != Xk.shape:
        raise T.ShapeError(f"pgd_step: shapes {grad.shape} and {Xk.shape} are incompatible")
    x = Xk.astype(np.float64)
    g = grad.astype(np.float64)
    if norm == "linf":
        x = x + alpha * np.sign(g)
    else:
        gn = _flat_norm(g)
        unit = np.where(_per_sample(gn, g.ndim) > 0, g / _per_sample(np.maximum(gn, 1e-30), g.ndim), 0.0)
        x = x + alpha * unit
    orig = X_orig.astype(np.float64)
    delta = project(x - orig, epsilon, norm)
    return np.clip(orig + delta, 0.0, 1.0).astype(Xk.dtype)


def attack_loss(model, Xk, y, ss_batch=None, lambda2: float = 1.0, use_ss: bool = False, head: str = "sup"):
    """``L_head(model(Xk), y) [+ lambda2 * L_ss(model_ss(X_ss), y_ss)]``."""
    if use_ss and ss_batch is None:
        raise ValueError("use_ss_loss requires a self-supervised batch")
    predict = model.predict_sup if head == "sup" else model.predict_ss
    loss = T.cross_entropy_mean(predict(Xk, update_stats=False), y)
    if use_ss:
        xs, ys = ss_batch
        ss = T.cross_entropy_mean(model.predict_ss(xs, update_stats=False), ys)
        loss = loss + T.scale(ss, lambda2)
    return loss


def check_in_ball(X_adv, X, epsilon: float, norm: str, rtol: float = 1e-5) -> None:
    d = X_adv.astype(np.float64) - X.astype(np.float64)
    size = np.abs(d).reshape(len(d), -1).max(axis=1) if norm == "linf" else _flat_norm(d)
    worst = float(size.max()) if size.size else 0.0
    if worst > epsilon * (1 + rtol):
        raise AssertionError(f"perturbation {worst!r} leaves the {norm} ball of radius {epsilon!r}")
    if X_adv.min() < 0 or X_adv.max() > 1:
        raise AssertionError("adversarial pixels outside [0, 1]")


def per_sample_ce(logits: np.ndarray, labels) -> np.ndarray:
    logp = T.log_softmax(logits.astype(np.float64))
    return -logp[np.arange(len(labels)), np.asarray(labels)]


def pgd_attack(model, X, y, cfg: AttackConfig, rng: np.random.Generator, ss_batch=None,
               head: str = "sup", compute_losses: bool = True) -> AdvBatch:
    """Projected gradient ascent on the attack loss.

    ``ss_batch`` is ``(X_ss, y_ss)``. With ``cfg.attack_ss`` the SS images are
    perturbed too: both batches take a step along their own gradient of the
    single combined loss and are projected around their own clean images.
    The model is run in eval mode and its parameters are never written.
    """
    cfg.validate()
    if cfg.use_ss_loss and ss_batch is None:
        raise ValueError("use_ss_loss requires a self-supervised batch")
    if cfg.attack_ss and ss_batch is None:
        raise ValueError("attack_ss requires a self-supervised batch")
    X = np.asarray(X, dtype=np.float32)
    if X.size and (X.min() < 0 or X.max() > 1):
        raise ValueError("attack inputs must lie in [0, 1]")
    xs0 = ys = None
    if ss_batch is not None:
        xs0, ys = np.asarray(ss_batch[0], dtype=np.float32), ss_batch[1]
    eps, norm = float(cfg.epsilon), cfg.norm

    was_training = getattr(model, "training", False)
    model.eval()
    try:
        xk = random_init(X, eps, norm, rng) if cfg.random_start else X.copy()
        xsk = None
        if xs0 is not None:
            xsk = random_init(xs0, eps, norm, rng) if (cfg.attack_ss and cfg.random_start) else xs0.copy()
        if eps > 0:
            for _ in range(cfg.steps):
                tx = T.Tensor(xk, requires_grad=True)
                ts = T.Tensor(xsk, requires_grad=cfg.attack_ss) if xsk is not None else None
                loss = attack_loss(model, tx, y, (ts, ys) if ts is not None else None,
                                   cfg.lambda2, cfg.use_ss_loss, head)
                wrt = [tx, ts] if (cfg.attack_ss and cfg.use_ss_loss) else [tx]
                grads = T.grad(loss, wrt)
                xk = pgd_step(xk, grads[0], cfg.alpha, norm, X, eps)
                if cfg.attack_ss:
                    gs = grads[1] if len(grads) > 1 else np.zeros_like(xsk)
                    xsk = pgd_step(xsk, gs, cfg.alpha, norm, xs0, eps)
        check_in_ball(xk, X, eps, norm)
        if cfg.attack_ss:
            check_in_ball(xsk, xs0, eps, norm)
        losses = None
        if compute_losses:
            with T.no_grad():
                predict = model.predict_sup if head == "sup" else model.predict_ss
                losses = per_sample_ce(predict(xk, update_stats=False).data, y)
                if cfg.use_ss_loss:
                    losses = losses + cfg.lambda2 * per_sample_ce(
                        model.predict_ss(xsk, update_stats=False).data, ys)
    finally:
        if was_training:
            model.train()
    return AdvBatch(xk, xsk if cfg.attack_ss else None, losses)
