"""Six common image corruptions at five severities.

Severity parameters (strictly increasing with severity):

=============== ======================================= =======================
kind            parameter                               severity 1 .. 5
=============== ======================================= =======================
gaussian_noise  noise std                               .04 .06 .08 .09 .10
shot_noise      1 / photon count                        1/500 1/250 1/100 1/75 1/50
impulse_noise   salt-and-pepper fraction                .01 .02 .03 .05 .07
box_blur        box width (pixels)                      2 3 4 5 6
brightness      additive shift                          .05 .10 .15 .20 .30
contrast        contrast reduction ``1 - c``            .25 .50 .60 .70 .85
=============== ======================================= =======================
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .data import ImageDataset

SEVERITY_TABLE = {
    "gaussian_noise": (0.04, 0.06, 0.08, 0.09, 0.10),
    "shot_noise": (1 / 500, 1 / 250, 1 / 100, 1 / 75, 1 / 50),
    "impulse_noise": (0.01, 0.02, 0.03, 0.05, 0.07),
    "box_blur": (2, 3, 4, 5, 6),
    "brightness": (0.05, 0.10, 0.15, 0.20, 0.30),
    "contrast": (0.25, 0.50, 0.60, 0.70, 0.85),
}
KINDS = tuple(SEVERITY_TABLE)


@dataclass
class CorruptionSet:
    corruption: str
    severity: int
    dataset: ImageDataset

    def __post_init__(self):
        if not 1 <= self.severity <= 5:
            raise ValueError(f"severity must lie in [1, 5], got {self.severity}")


def corrupt(images: np.ndarray, kind: str, param: float, rng: np.random.Generator) -> np.ndarray:
    """Apply one corruption with an explicit parameter value."""
    x = images.astype(np.float64)
    if kind == "gaussian_noise":
        out = x + rng.normal(scale=param, size=x.shape) if param > 0 else x
    elif kind == "shot_noise":
        out = rng.poisson(x / param) * param if param > 0 else x
    elif kind == "impulse_noise":
        u = rng.random(x.shape)
        out = np.where(u < param / 2, 0.0, np.where(u < param, 1.0, x))
    elif kind == "box_blur":
        size = int(param)
        out = ndimage.uniform_filter(x, size=(1, 1, size, size), mode="reflect") if size > 1 else x
    elif kind == "brightness":
        out = x + param
    elif kind == "contrast":
        mean = x.mean(axis=(1, 2, 3), keepdims=True)
        out = (x - mean) * (1 - param) + mean
    else:
        raise ValueError(f"unknown corruption {kind!r}; valid kinds: {', '.join(KINDS)}")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def generate_corruptions(ds: ImageDataset, kind: str, severity: int, seed: int = 0) -> CorruptionSet:
    if kind not in SEVERITY_TABLE:
        raise ValueError(f"unknown corruption {kind!r}; valid kinds: {', '.join(KINDS)}")
    if not 1 <= severity <= 5:
        raise ValueError(f"severity must lie in [1, 5], got {severity}")
    rng = np.random.default_rng([seed, KINDS.index(kind), severity])
    images = corrupt(ds.images, kind, SEVERITY_TABLE[kind][severity - 1], rng)
    return CorruptionSet(kind, severity, ImageDataset(images, ds.labels, f"{ds.name}-{kind}-{severity}", ds.class_count))
