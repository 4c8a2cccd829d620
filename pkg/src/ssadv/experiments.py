"""Desk-scale directional experiments on a CIFAR-10 subset.

Each arm is trained for several seeds; decisions use the median over seeds.
Results are cached per arm and seed as JSON so an interrupted sweep picks up
where it stopped.
"""
from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .data import ImageDataset, load_cifar10_bin, split_train_val
from .evaluation import eval_robust
from .models import ArchConfig
from .ss_tasks import SSTask
from .training import TrainConfig, TrainMode, adv_train, mode_attack

log = logging.getLogger(__name__)


@dataclass
class DeskSetup:
    train_subset: int = 10_000
    test_subset: int = 2_000
    epochs: int = 20
    steps: int = 10
    epsilon: float = 8 / 255
    eval_steps: int = 20
    seeds: tuple[int, ...] = (0, 1, 2)
    batch_size: int = 128
    width: float = 1.0


@dataclass
class Arm:
    name: str
    mode: str
    lambda1: float = 0.0
    lambda2: float = 1.0


@dataclass
class ArmResult:
    arm: str
    seed: int
    ta: float
    ra: dict[str, float] = field(default_factory=dict)
    best_epoch: int = -1


def desk_data(data_dir, setup: DeskSetup, seed: int) -> tuple[ImageDataset, ImageDataset, ImageDataset]:
    """Fixed 10k training subset (seed 0), per-seed train/val split, fixed test subset."""
    full = load_cifar10_bin(data_dir, "train")
    test = load_cifar10_bin(data_dir, "test")
    idx = np.sort(np.random.default_rng(0).permutation(len(full))[: setup.train_subset])
    train, val = split_train_val(full.subset(idx), 0.15, seed)
    return train, val, test.subset(np.arange(min(setup.test_subset, len(test))))


def run_arm(arm: Arm, seed: int, setup: DeskSetup, data_dir, eval_eps, cache_dir=None) -> ArmResult:
    cache = Path(cache_dir) / f"{arm.name}-seed{seed}.json" if cache_dir else None
    if cache is not None and cache.exists():
        return ArmResult(**json.loads(cache.read_text()))
    train, val, test = desk_data(data_dir, setup, seed)
    base = AttackConfig("linf", setup.epsilon, 2 / 255, setup.steps, lambda2=arm.lambda2)
    cfg = TrainConfig(epochs=setup.epochs, batch_size=setup.batch_size, seed=seed,
                      mode=TrainMode(arm.mode, arm.lambda1, mode_attack(arm.mode, base)), task=SSTask("rotation"))
    arch = ArchConfig("tiny-cnn", setup.width, train.images.shape[1:], 10, 4)
    res = adv_train(cfg, train, val, arch=arch, model_id=arm.name)
    accs = eval_robust(res.model, test, [0.0, *eval_eps], base, seed=seed, steps=setup.eval_steps)
    out = ArmResult(arm.name, seed, accs[0.0], {repr(e): accs[e] for e in eval_eps}, res.best_epoch)
    log.info("%s seed %d: TA %.2f RA %s", arm.name, seed, out.ta, out.ra)
    if cache is not None:
        cache.parent.mkdir(parents=True, exist_ok=True)
        cache.write_text(json.dumps(asdict(out)))
    return out


def medians(results: list[ArmResult]) -> dict:
    """``{"ta": median TA, "ra": {eps: median RA}}`` over seeds."""
    eps_keys = results[0].ra.keys()
    return {
        "ta": statistics.median(r.ta for r in results),
        "ra": {k: statistics.median(r.ra[k] for r in results) for k in eps_keys},
    }


def run_comparison(arms: list[Arm], setup: DeskSetup, data_dir, eval_eps, cache_dir=None) -> dict[str, dict]:
    return {
        arm.name: medians([run_arm(arm, s, setup, data_dir, eval_eps, cache_dir) for s in setup.seeds])
        for arm in arms
    }


# --- the two directional checks ------------------------------------------------

LAMBDA_ARMS = [Arm("T1-lambda0", "T1", 0.0), Arm("T1-lambda2", "T1", 2.0)]
LAMBDA_EPS = (12 / 255,)
T3_ARMS = [Arm("T0", "T0", 0.0), Arm("T3", "T3", 1.0, 1.0)]
T3_EPS = (8 / 255, 10 / 255)


def lambda_verdict(summary: dict) -> tuple[bool, str]:
    """Larger SS weight: higher clean accuracy, lower robust accuracy at 12/255."""
    a, b = summary["T1-lambda0"], summary["T1-lambda2"]
    k = repr(12 / 255)
    ok = b["ta"] > a["ta"] and b["ra"][k] < a["ra"][k]
    return ok, (f"TA {b['ta']:.2f} vs {a['ta']:.2f} (lambda1=2 vs 0); "
                f"RA@12/255 {b['ra'][k]:.2f} vs {a['ra'][k]:.2f}")


def t3_verdict(summary: dict) -> tuple[bool, str]:
    """T3 at least as robust as T0 at 8/255 and 10/255, clean accuracy at most 1 point higher."""
    t0, t3 = summary["T0"], summary["T3"]
    ra_ok = all(t3["ra"][repr(e)] >= t0["ra"][repr(e)] for e in T3_EPS)
    ta_ok = t3["ta"] <= t0["ta"] + 1.0
    detail = "; ".join(f"RA@{round(e * 255)}/255 {t3['ra'][repr(e)]:.2f} vs {t0['ra'][repr(e)]:.2f}" for e in T3_EPS)
    return ra_ok and ta_ok, f"{detail}; TA {t3['ta']:.2f} vs {t0['ta']:.2f} (T3 vs T0)"
