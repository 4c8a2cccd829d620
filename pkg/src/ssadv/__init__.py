"""Adversarial training with self-supervised pretext tasks on a small numpy autodiff engine."""

__version__ = "0.1.0"
