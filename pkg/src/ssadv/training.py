"""Adversarial training with a self-supervised auxiliary task.

Modes
-----
T0         plain PGD adversarial training, no SS batch.
T1         attack X only; the SS loss sees the clean transformed batch.
T2         attack X and X_ss with the supervised loss only.
T3         attack X and X_ss with ``L_sup + lambda2 * L_ss``.
T_rotonly  transform first, attack the transformed batch and train both
           heads on it (known to underperform T0; kept for ablations).

The parameter objective is ``L_sup + lambda1 * L_ss`` in every SS mode.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd_attack
from .data import ImageDataset, augment
from .evaluation import eval_standard, ss_accuracy
from .models import ArchConfig, TwoHeadModel, build_model, load_checkpoint, load_pretrained, save_checkpoint
from .optim import SGD
from .ss_tasks import SSTask

log = logging.getLogger(__name__)

MODES = ("T0", "T1", "T2", "T3", "T_rotonly")
_ATTACK_FLAGS = {  # (attack_ss, use_ss_loss)
    "T0": (False, False),
    "T1": (False, False),
    "T2": (True, False),
    "T3": (True, True),
    "T_rotonly": (False, False),
}


class ConfigError(ValueError):
    pass


@dataclass
class TrainMode:
    tag: str = "T0"
    lambda1: float = 0.0
    attack: AttackConfig = field(default_factory=AttackConfig)

    def validate(self) -> None:
        if self.tag not in MODES:
            raise ConfigError(f"mode={self.tag!r} is not one of {MODES}")
        if self.lambda1 < 0:
            raise ConfigError(f"lambda1={self.lambda1} must be non-negative")
        if self.tag == "T0" and self.lambda1 > 0:
            raise ConfigError(f"mode=T0 contradicts lambda1={self.lambda1} (T0 has no self-supervised loss)")
        attack_ss, use_ss = _ATTACK_FLAGS[self.tag]
        if self.attack.use_ss_loss != use_ss:
            raise ConfigError(f"mode={self.tag} contradicts use_ss_loss={str(self.attack.use_ss_loss).lower()}")
        if self.attack.attack_ss != attack_ss:
            raise ConfigError(f"mode={self.tag} contradicts attack_ss={str(self.attack.attack_ss).lower()}")
        self.attack.validate()

    @property
    def uses_ss(self) -> bool:
        return self.tag != "T0"


def mode_attack(tag: str, base: AttackConfig) -> AttackConfig:
    """Copy of ``base`` with the SS switches implied by ``tag``."""
    attack_ss, use_ss = _ATTACK_FLAGS[tag]
    return dataclasses.replace(base, attack_ss=attack_ss, use_ss_loss=use_ss)


def compose_loss(mode: str, lambda1: float, sup_loss, ss_loss=None):
    """``sup_loss + lambda1 * ss_loss``; T0 returns ``sup_loss`` alone.

    Accepts tensors or plain floats.
    """
    if mode == "T0":
        if lambda1 > 0:
            raise ConfigError(f"mode=T0 contradicts lambda1={lambda1}")
        if ss_loss is not None:
            raise ValueError("mode T0 takes no self-supervised loss")
        return sup_loss
    if ss_loss is None:
        raise ValueError(f"mode {mode} needs a self-supervised loss")
    if isinstance(sup_loss, T.Tensor):
        return sup_loss + T.scale(ss_loss, lambda1)
    return sup_loss + lambda1 * ss_loss


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 0.1
    lr_step: int = 40
    lr_gamma: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    mode: TrainMode = field(default_factory=TrainMode)
    task: SSTask = field(default_factory=SSTask)
    augment: bool = True
    eval_batch_size: int = 256
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr={self.lr} must be positive")
        if self.lr_step < 1:
            raise ConfigError(f"lr_step={self.lr_step} must be a positive epoch count")
        self.mode.validate()

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_gamma ** (epoch // self.lr_step)


@dataclass
class Streams:
    """Independent generators so that each source of randomness can be
    switched on or off without shifting the others."""

    data: np.random.Generator
    ss: np.random.Generator
    attack: np.random.Generator
    init_seed: int

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        d, s, a, i = np.random.SeedSequence(seed).spawn(4)
        return cls(np.random.default_rng(d), np.random.default_rng(s), np.random.default_rng(a),
                   int(i.generate_state(1)[0]))

    def state(self) -> dict:
        return {k: getattr(self, k).bit_generator.state for k in ("data", "ss", "attack")}

    def restore(self, state: dict) -> None:
        for k, v in state.items():
            getattr(self, k).bit_generator.state = v


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    sup_loss: float | None
    ss_loss: float | None
    val_ta: float | None
    seconds: float


@dataclass
class TrainResult:
    model: TwoHeadModel
    history: list[EpochRecord]
    best_epoch: int
    best_val_ta: float | None


@dataclass
class TrainBatch:
    x_sup: np.ndarray
    y: np.ndarray
    x_ss: np.ndarray | None = None
    y_ss: np.ndarray | None = None
    x_ss_clean: np.ndarray | None = None


def prepare_batch(model, X, y, mode: TrainMode, task: SSTask, streams: Streams) -> TrainBatch:
    """Form the SS copy of the batch and run the mode's attack."""
    atk = mode.attack
    if mode.tag == "T0":
        adv = pgd_attack(model, X, y, atk, streams.attack, compute_losses=False)
        return TrainBatch(adv.x_adv, y)
    X_ss, y_ss = task.apply(X, streams.ss)
    if mode.tag == "T1":
        adv = pgd_attack(model, X, y, atk, streams.attack, compute_losses=False)
        return TrainBatch(adv.x_adv, y, X_ss, y_ss, X_ss)
    if mode.tag in ("T2", "T3"):
        adv = pgd_attack(model, X, y, atk, streams.attack, ss_batch=(X_ss, y_ss), compute_losses=False)
        return TrainBatch(adv.x_adv, y, adv.x_ss_adv, y_ss, X_ss)
    adv = pgd_attack(model, X_ss, y, atk, streams.attack, compute_losses=False)
    return TrainBatch(adv.x_adv, y, adv.x_adv, y_ss, X_ss)


def training_loss(model, batch: TrainBatch, mode: TrainMode):
    """Parameter-update objective for one prepared batch: ``(total, sup, ss)``."""
    ss = None
    if mode.tag == "T_rotonly":
        sup_logits, ss_logits = model.predict_both(batch.x_sup)
        ss = T.cross_entropy_mean(ss_logits, batch.y_ss)
    else:
        sup_logits = model.predict_sup(batch.x_sup)
        if mode.uses_ss:
            # running statistics track the supervised batch only
            ss = T.cross_entropy_mean(model.predict_ss(batch.x_ss, update_stats=False), batch.y_ss)
    sup = T.cross_entropy_mean(sup_logits, batch.y)
    return compose_loss(mode.tag, mode.lambda1, sup, ss), sup, ss


def train_step(model: TwoHeadModel, batch: TrainBatch, mode: TrainMode, opt: SGD, lr: float):
    model.train()
    opt.zero_grad()
    loss, sup, ss = training_loss(model, batch, mode)
    T.backward(loss)
    opt.step(lr)
    return sup.item(), (ss.item() if ss is not None else None)


def train_epoch(model, data: ImageDataset, cfg: TrainConfig, opt: SGD, streams: Streams, lr: float):
    """One pass over ``data``; returns mean (sup_loss, ss_loss)."""
    order = streams.data.permutation(len(data))
    sups, sss, sizes = [], [], []
    for X, y in data.batches(cfg.batch_size, order):
        X = augment(X, streams.data, enabled=cfg.augment)
        batch = prepare_batch(model, X, y, cfg.mode, cfg.task, streams)
        sup, ss = train_step(model, batch, cfg.mode, opt, lr)
        sups.append(sup)
        sss.append(ss)
        sizes.append(len(y))
    w = np.asarray(sizes, dtype=np.float64)
    sup_mean = float(np.average(sups, weights=w))
    ss_mean = None if cfg.mode.tag == "T0" else float(np.average(sss, weights=w))
    return sup_mean, ss_mean


def _make_optimizer(model: TwoHeadModel, cfg: TrainConfig) -> SGD:
    return SGD(model.params, cfg.momentum, cfg.weight_decay, model.decay_names)


def _run(cfg: TrainConfig, train_ds, val_ds, model, epoch_fn, score_fn, out_dir, resume, meta, select_best):
    cfg.validate()
    if len(train_ds) == 0:
        raise ValueError("training set is empty")
    # without a validation set there is nothing to select on: keep the last epoch
    select_best = select_best and val_ds is not None
    streams = Streams.from_seed(cfg.seed)
    opt = _make_optimizer(model, cfg)
    history: list[EpochRecord] = []
    best_state, best_epoch, best_score = model.copy_state(), -1, None
    start = 0
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        if resume and (out / "last.ckpt").exists():
            last, lmeta, other = load_checkpoint(out / "last.ckpt")
            model.load_state_dict(last.state_dict())
            opt.load_state_dict(other)
            streams.restore(lmeta["streams"])
            history = [EpochRecord(**r) for r in lmeta["history"]]
            start = lmeta["epoch"] + 1
            best_epoch, best_score = lmeta["best_epoch"], lmeta["best_score"]
            best_state = {k[len("best/"):]: v for k, v in other.items() if k.startswith("best/")}
    for epoch in range(start, cfg.epochs):
        t0 = time.perf_counter()
        lr = cfg.lr_at(epoch)
        sup, ss = epoch_fn(model, train_ds, cfg, opt, streams, lr)
        score = score_fn(model, val_ds) if val_ds is not None else None
        rec = EpochRecord(epoch, lr, sup, ss, score, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d lr %.4g sup %s ss %s val %s (%.1fs)", epoch, lr, sup, ss, score, rec.seconds)
        improved = select_best and score is not None and (best_score is None or score > best_score)
        if improved or not select_best:
            best_state, best_epoch, best_score = model.copy_state(), epoch, score
            if out is not None:
                save_checkpoint(out / "best.ckpt", model, {**meta, "epoch": epoch, "val_ta": score})
        if out is not None:
            last_epoch = epoch == cfg.epochs - 1
            if last_epoch or (cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0):
                save_checkpoint(
                    out / "last.ckpt", model,
                    {**meta, "epoch": epoch, "streams": streams.state(), "best_epoch": best_epoch,
                     "best_score": best_score, "history": [dataclasses.asdict(r) for r in history]},
                    extra={**opt.state_dict(), **{f"best/{k}": v for k, v in best_state.items()}},
                )
            write_history(history, out / "history.csv")
    model.load_state_dict(best_state)
    return TrainResult(model, history, best_epoch, best_score)


def provenance(cfg: TrainConfig) -> dict:
    atk = cfg.mode.attack
    return {
        "mode": cfg.mode.tag, "lambda1": cfg.mode.lambda1, "lambda2": atk.lambda2 if atk.use_ss_loss else 0.0,
        "norm": atk.norm, "eps_train": atk.epsilon, "seed": cfg.seed, "task": cfg.task.to_dict(),
        "attack": atk.to_dict(),
    }


def adv_train(cfg: TrainConfig, train_ds: ImageDataset, val_ds: ImageDataset | None, arch: ArchConfig | None = None,
              model: TwoHeadModel | None = None, init_checkpoint=None, out_dir=None, resume: bool = False,
              model_id: str = "model") -> TrainResult:
    """Train ``cfg.epochs`` epochs and return the epoch with the highest
    clean validation accuracy (earliest on ties)."""
    cfg.validate()
    streams = Streams.from_seed(cfg.seed)
    if model is None:
        arch = arch or ArchConfig(input_shape=train_ds.images.shape[1:], num_classes=train_ds.class_count,
                                  ss_classes=cfg.task.class_count)
        model = build_model(arch, streams.init_seed)
    if model.cfg.ss_classes != cfg.task.class_count:
        raise ConfigError(f"ss head has {model.cfg.ss_classes} outputs but task has {cfg.task.class_count} classes")
    if init_checkpoint is not None:
        load_pretrained(model, init_checkpoint)
    meta = {**provenance(cfg), "model_id": model_id, "kind": "train"}

    def score(m, ds):
        return eval_standard(m, ds, cfg.eval_batch_size)

    return _run(cfg, train_ds, val_ds, model, train_epoch, score, out_dir, resume, meta, select_best=True)


def pretrain_epoch(model, data: ImageDataset, cfg: TrainConfig, opt: SGD, streams: Streams, lr: float):
    order = streams.data.permutation(len(data))
    losses, sizes = [], []
    for X, _ in data.batches(cfg.batch_size, order):
        X = augment(X, streams.data, enabled=cfg.augment)
        X_ss, y_ss = cfg.task.apply(X, streams.ss)
        adv = pgd_attack(model, X_ss, y_ss, cfg.mode.attack, streams.attack, head="ss", compute_losses=False)
        model.train()
        opt.zero_grad()
        loss = T.cross_entropy_mean(model.predict_ss(adv.x_adv), y_ss)
        T.backward(loss)
        opt.step(lr)
        losses.append(loss.item())
        sizes.append(len(X))
    return None, float(np.average(losses, weights=sizes))


def ss_pretrain(cfg: TrainConfig, train_ds: ImageDataset, val_ds: ImageDataset | None, norm: str | None = None,
                arch: ArchConfig | None = None, model: TwoHeadModel | None = None, out_dir=None,
                resume: bool = False, model_id: str = "pretrain") -> TrainResult:
    """Adversarial training on the pretext task alone (labels ``y_ss``).

    ``norm`` selects l2 (P1) or linf (P2) perturbations. The final epoch is
    returned; its ``val_ta`` column holds pretext-task accuracy.
    """
    if norm is not None:
        cfg = dataclasses.replace(cfg, mode=dataclasses.replace(cfg.mode, attack=dataclasses.replace(cfg.mode.attack, norm=norm)))
    cfg = dataclasses.replace(cfg, mode=TrainMode("T0", 0.0, mode_attack("T0", cfg.mode.attack)))
    cfg.validate()
    streams = Streams.from_seed(cfg.seed)
    if model is None:
        arch = arch or ArchConfig(input_shape=train_ds.images.shape[1:], num_classes=train_ds.class_count,
                                  ss_classes=cfg.task.class_count)
        model = build_model(arch, streams.init_seed)
    meta = {**provenance(cfg), "mode": "pretrain", "model_id": model_id, "kind": "pretrain"}

    def score(m, ds):
        return ss_accuracy(m, ds, cfg.task, seed=cfg.seed, batch_size=cfg.eval_batch_size)

    return _run(cfg, train_ds, val_ds, model, pretrain_epoch, score, out_dir, resume, meta, select_best=False)


HISTORY_HEADER = ("epoch", "lr", "sup_loss", "ss_loss", "val_ta", "seconds")


def write_history(history: list[EpochRecord], path) -> None:
    def fmt(v):
        return "" if v is None else repr(v)

    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.epoch, fmt(r.lr), fmt(r.sup_loss), fmt(r.ss_loss), fmt(r.val_ta), f"{r.seconds:.3f}"])


def read_history(path) -> list[EpochRecord]:
    def opt(v):
        return None if v == "" else float(v)

    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    return [EpochRecord(int(r["epoch"]), float(r["lr"]), opt(r["sup_loss"]), opt(r["ss_loss"]), opt(r["val_ta"]),
                        float(r["seconds"])) for r in rows]
