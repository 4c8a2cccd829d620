"""Pretext transforms producing ``(X_ss, y_ss)`` from an image batch.

Rotation labels ``k`` mean a counter-clockwise rotation by ``k * 90`` degrees
(``np.rot90`` orientation): ``[[a, b], [c, d]]`` with label 1 becomes
``[[b, d], [a, c]]``.

Jigsaw splits each image into an ``n x n`` grid of tiles numbered row-major.
Permutation ``p`` places input tile ``p[i]`` at grid position ``i``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T


def rotate_batch(X: np.ndarray, rng: np.random.Generator, labels: np.ndarray | None = None):
    """Rotate every image by an independently drawn multiple of 90 degrees."""
    X = np.asarray(X)
    if X.shape[-1] != X.shape[-2]:
        raise ValueError(f"rotation needs square images, got {X.shape[-2]}x{X.shape[-1]}")
    if labels is None:
        labels = rng.integers(0, 4, size=len(X))
    labels = np.asarray(labels, dtype=np.int64)
    out = np.empty_like(X)
    for k in range(4):
        idx = np.flatnonzero(labels == k)
        if idx.size:
            out[idx] = np.rot90(X[idx], k, axes=(-2, -1))
    return out, labels


def permute_tiles(X: np.ndarray, perm, n: int) -> np.ndarray:
    """Rearrange the ``n x n`` tiles of every image in ``X`` by ``perm``."""
    B, C, H, W = X.shape
    if H % n or W % n:
        raise ValueError(f"image size {H}x{W} is not divisible by grid {n}")
    th, tw = H // n, W // n
    tiles = X.reshape(B, C, n, th, n, tw).transpose(0, 2, 4, 1, 3, 5).reshape(B, n * n, C, th, tw)
    tiles = tiles[:, np.asarray(perm)]
    return tiles.reshape(B, n, n, C, th, tw).transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)


def inverse_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def make_permutation_set(n: int, J: int, seed: int = 0, pool: int = 20000) -> np.ndarray:
    """Greedy max-min Hamming selection of ``J`` tile permutations.

    Starts from the identity and repeatedly adds the candidate whose
    minimum Hamming distance to the chosen set is largest; ties are broken
    by a seeded draw. Candidates are all ``(n*n)!`` permutations when that
    is at most 9!, otherwise ``pool`` seeded random permutations.
    """
    cells = n * n
    total = math.factorial(cells)
    if J < 1 or J > total:
        raise ValueError(f"J={J} must lie in [1, {total}] for a {n}x{n} grid")
    rng = np.random.default_rng(seed)
    if cells <= 9:
        cand = np.array(list(itertools.permutations(range(cells))), dtype=np.int64)
    else:
        if J > pool:
            raise ValueError(f"J={J} exceeds the candidate pool of {pool}")
        cand = np.array([rng.permutation(cells) for _ in range(pool)], dtype=np.int64)
        cand = np.unique(cand, axis=0)
    ident = np.arange(cells)
    chosen = [ident]
    mind = (cand != ident).sum(axis=1)
    mind[(cand == ident).all(axis=1)] = -1
    for _ in range(J - 1):
        best = np.flatnonzero(mind == mind.max())
        pick = best[rng.integers(len(best))]
        chosen.append(cand[pick])
        mind = np.minimum(mind, (cand != cand[pick]).sum(axis=1))
        mind[pick] = -1
    return np.stack(chosen)


@dataclass
class SSTask:
    """A pretext task: ``kind`` is ``"rotation"`` or ``"jigsaw"``."""

    kind: str = "rotation"
    grid: int = 2
    num_permutations: int = 24
    seed: int = 0
    permutations: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in ("rotation", "jigsaw"):
            raise ValueError(f"unknown self-supervised task {self.kind!r}")
        if self.kind == "jigsaw":
            if self.permutations is None:
                self.permutations = make_permutation_set(self.grid, self.num_permutations, self.seed)
            self.permutations = np.asarray(self.permutations, dtype=np.int64)
            perms = self.permutations
            cells = self.grid * self.grid
            if perms.ndim != 2 or perms.shape[1] != cells:
                raise ValueError(f"permutation set must have shape (J, {cells}), got {perms.shape}")
            if not (np.sort(perms, axis=1) == np.arange(cells)).all():
                raise ValueError("every permutation must be a bijection on the grid cells")
            if len(np.unique(perms, axis=0)) != len(perms):
                raise ValueError("permutation set contains duplicates")
            if not (perms[0] == np.arange(cells)).all():
                raise ValueError("permutation 0 must be the identity")
            self.num_permutations = len(perms)

    @property
    def class_count(self) -> int:
        return 4 if self.kind == "rotation" else len(self.permutations)

    def apply(self, X: np.ndarray, rng: np.random.Generator):
        if self.kind == "rotation":
            return rotate_batch(X, rng)
        return jigsaw_batch(X, self, rng)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "grid": self.grid, "seed": self.seed}
        if self.kind == "jigsaw":
            d["permutations"] = self.permutations.tolist()
        return d

    @classmethod
    def from_dict(cls, d) -> "SSTask":
        perms = d.get("permutations")
        return cls(
            kind=d["kind"],
            grid=d.get("grid", 2),
            num_permutations=len(perms) if perms else 24,
            seed=d.get("seed", 0),
            permutations=None if perms is None else np.asarray(perms),
        )


def jigsaw_batch(X: np.ndarray, task: SSTask, rng: np.random.Generator, labels=None):
    X = np.asarray(X)
    n = task.grid
    if X.shape[-2] % n or X.shape[-1] % n:
        raise ValueError(f"image size {X.shape[-2]}x{X.shape[-1]} is not divisible by grid {n}")
    if labels is None:
        labels = rng.integers(0, len(task.permutations), size=len(X))
    labels = np.asarray(labels, dtype=np.int64)
    out = np.empty_like(X)
    for j in np.unique(labels):
        idx = np.flatnonzero(labels == j)
        out[idx] = permute_tiles(X[idx], task.permutations[j], n)
    return out, labels


def ss_loss(model, X_ss, y_ss, task: SSTask | None = None, update_stats: bool = True) -> T.Tensor:
    """Batch-mean cross entropy of the self-supervision head."""
    logits = model.predict_ss(X_ss, update_stats=update_stats)
    if task is not None and logits.shape[1] != task.class_count:
        raise ValueError(
            f"self-supervision head has {logits.shape[1]} outputs but task {task.kind!r} has {task.class_count} classes"
        )
    return T.cross_entropy_mean(logits, y_ss)
