"""Command-line entry point.

    ssadv train     --config FILE [--set k=v ...] [--seed N] [--out DIR]
    ssadv pretrain  --config FILE [--norm l2|linf]
    ssadv eval      CHECKPOINT --config FILE
    ssadv sweep     CHECKPOINT [CHECKPOINT ...] [--baseline MODEL_ID]
    ssadv corrupt   [--eval CHECKPOINT] [--attacked]
    ssadv report-merge CSV [CSV ...]

Data root defaults to ``$SSADV_DATA`` when ``data_dir`` is unset.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig, dump_config, load_config
from .corruptions import CorruptionSet, generate_corruptions
from .data import (
    ImageDataset,
    load_cifar10_bin,
    load_cifar10c,
    save_dataset,
    split_train_val,
    synthetic_dataset,
)
from .evaluation import (
    EvalReport,
    EvalRow,
    difference_vs_baseline,
    emit_report,
    eval_corruptions,
    eval_robust,
    default_eps_grid,
    merge_reports,
    write_figure_data,
)
from .models import load_checkpoint
from .training import adv_train, ss_pretrain, write_history

log = logging.getLogger("ssadv")
DATA_ENV = "SSADV_DATA"


class CliError(RuntimeError):
    pass


# --- data ------------------------------------------------------------------

def load_data(cfg: RunConfig) -> tuple[ImageDataset, ImageDataset, ImageDataset]:
    """``(train, val, test)`` for the configured dataset."""
    if cfg.dataset == "cifar10":
        root = cfg.data_dir or os.environ.get(DATA_ENV)
        if not root:
            raise CliError(f"no data directory: set data_dir or ${DATA_ENV}")
        if not Path(root).is_dir():
            raise CliError(f"data directory {root} does not exist")
        try:
            full = load_cifar10_bin(root, "train")
            test = load_cifar10_bin(root, "test")
        except FileNotFoundError as e:
            raise CliError(str(e)) from None
    elif cfg.dataset.startswith("synthetic-"):
        kind = {"synthetic-striped": "striped-classes", "synthetic-gaussians": "two-gaussians-images"}.get(cfg.dataset)
        if kind is None:
            raise CliError(f"unknown dataset {cfg.dataset!r}")
        classes = 10 if kind == "striped-classes" else 2
        shape = (3, cfg.image_size, cfg.image_size)
        full = synthetic_dataset(kind, cfg.synthetic_n, cfg.seed, shape, classes)
        test = synthetic_dataset(kind, max(cfg.synthetic_n // 4, classes), cfg.seed + 10_000, shape, classes)
    else:
        raise CliError(f"unknown dataset {cfg.dataset!r}")
    if cfg.subset:
        idx = np.random.default_rng(cfg.seed).permutation(len(full))[: cfg.subset]
        full = full.subset(np.sort(idx))
    if cfg.eval_subset:
        test = test.subset(np.arange(min(cfg.eval_subset, len(test))))
    train, val = split_train_val(full, cfg.val_fraction, cfg.seed)
    return train, val, test


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _check_arch(model, ds: ImageDataset, path) -> None:
    if tuple(model.cfg.input_shape) != tuple(ds.images.shape[1:]) or model.cfg.num_classes != ds.class_count:
        raise CliError(
            f"checkpoint {path} expects input {tuple(model.cfg.input_shape)} with {model.cfg.num_classes} classes, "
            f"data has {tuple(ds.images.shape[1:])} with {ds.class_count}"
        )


def _row(meta: dict, model_id: str, condition: str, eps: float, severity: int, acc: float, n: int, seed: int):
    return EvalRow(model_id, meta.get("norm", ""), float(meta.get("eps_train", 0.0)), meta.get("mode", ""),
                   float(meta.get("lambda1", 0.0)), float(meta.get("lambda2", 0.0)), condition, float(eps),
                   int(severity), float(acc), int(n), int(seed))


def _model_id(meta: dict, path) -> str:
    return meta.get("model_id") or Path(path).parent.name or Path(path).stem


# --- commands --------------------------------------------------------------

def cmd_train(cfg: RunConfig, args) -> None:
    out = _out_dir(args, "runs/train")
    dump_config(cfg, out / "config.yaml")
    train, val, _ = load_data(cfg)
    tcfg = cfg.train_config()
    arch = cfg.arch_config(train.images.shape[1:], train.class_count)
    res = adv_train(tcfg, train, val, arch=arch, init_checkpoint=cfg.init_checkpoint, out_dir=out,
                    resume=args.resume, model_id=cfg.model_id or out.name)
    write_history(res.history, out / "history.csv")
    log.info("best epoch %d, validation TA %.2f", res.best_epoch, res.best_val_ta or float("nan"))


def cmd_pretrain(cfg: RunConfig, args) -> None:
    out = _out_dir(args, "runs/pretrain")
    dump_config(cfg, out / "config.yaml")
    train, val, _ = load_data(cfg)
    tcfg = cfg.train_config()
    arch = cfg.arch_config(train.images.shape[1:], train.class_count)
    res = ss_pretrain(tcfg, train, val, norm=args.norm, arch=arch, out_dir=out, resume=args.resume,
                      model_id=cfg.model_id or out.name)
    write_history(res.history, out / "history.csv")


def _eval_rows(cfg: RunConfig, ckpt, test: ImageDataset) -> tuple[str, list[EvalRow]]:
    model, meta, _ = load_checkpoint(ckpt)
    _check_arch(model, test, ckpt)
    mid = _model_id(meta, ckpt)
    base = cfg.eval_attack_base()
    if meta.get("norm"):
        base.norm = meta["norm"]
    grid = cfg.eval_eps if cfg.eval_eps is not None else default_eps_grid(base.norm)
    accs = eval_robust(model, test, grid, base, seed=cfg.seed, steps=cfg.eval_steps,
                       batch_size=cfg.eval_batch_size, restarts=cfg.eval_restarts)
    return mid, [_row(meta, mid, "eps", e, 0, a, len(test), cfg.seed) for e, a in accs.items()]


def cmd_eval(cfg: RunConfig, args) -> None:
    out = _out_dir(args, "runs/eval")
    dump_config(cfg, out / "config.yaml")
    _, _, test = load_data(cfg)
    _, rows = _eval_rows(cfg, args.checkpoint, test)
    emit_report(EvalReport(rows), out / "report.csv")


def cmd_sweep(cfg: RunConfig, args) -> None:
    out = _out_dir(args, "runs/sweep")
    dump_config(cfg, out / "config.yaml")
    _, _, test = load_data(cfg)
    report = EvalReport()
    ids = []
    for ckpt in args.checkpoints:
        mid, rows = _eval_rows(cfg, ckpt, test)
        ids.append(mid)
        for r in rows:
            report.add(r)
    baseline = args.baseline or ids[0]
    if baseline not in ids:
        raise CliError(f"baseline {baseline!r} is not among the evaluated models {ids}")
    diffs = difference_vs_baseline(report, baseline)
    emit_report(report, out / "sweep.csv", append=False, extra={"diff_vs_baseline": diffs})
    write_figure_data(report, baseline, out / "figure_diff.csv")


def cmd_corrupt(cfg: RunConfig, args) -> None:
    out = _out_dir(args, "runs/corrupt")
    dump_config(cfg, out / "config.yaml")
    _, _, test = load_data(cfg)
    sets: list[CorruptionSet] = []
    cdir = out / "corruptions"
    cdir.mkdir(exist_ok=True)
    for kind in cfg.corruptions:
        for sev in cfg.severities:
            if cfg.corruption_dir:
                cs = CorruptionSet(kind, sev, load_cifar10c(cfg.corruption_dir, kind, sev))
            else:
                cs = generate_corruptions(test, kind, sev, cfg.seed)
            save_dataset(cdir / f"{kind}-{sev}.arr", cs.dataset)
            sets.append(cs)
    if not args.eval:
        return
    model, meta, _ = load_checkpoint(args.eval)
    _check_arch(model, test, args.eval)
    mid = _model_id(meta, args.eval)
    report = EvalReport()
    base = cfg.eval_attack_base()
    for attacked in (False, True) if args.attacked else (False,):
        cells, mean = eval_corruptions(model, sets, attacked, base, cfg.seed, cfg.eval_steps, cfg.eval_batch_size,
                                       cfg.eval_restarts)
        eps = base.epsilon if attacked else 0.0
        for (kind, sev), acc in cells.items():
            report.add(_row(meta, mid, kind, eps, sev, acc, len(test), cfg.seed))
        report.add(_row(meta, mid, "corruption-mean", eps, 0, mean, len(test), cfg.seed))
    emit_report(report, out / "report.csv")


def cmd_report_merge(args) -> None:
    out = _out_dir(args, "runs")
    merge_reports(args.reports, out / "merged.csv")


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ssadv", description="adversarial training with self-supervision")
    sub = p.add_subparsers(dest="command", required=True)
    t = sub.add_parser("train", parents=[common])
    t.add_argument("--resume", action="store_true")
    pt = sub.add_parser("pretrain", parents=[common])
    pt.add_argument("--norm", choices=("l2", "linf"))
    pt.add_argument("--resume", action="store_true")
    e = sub.add_parser("eval", parents=[common])
    e.add_argument("checkpoint")
    s = sub.add_parser("sweep", parents=[common])
    s.add_argument("checkpoints", nargs="+")
    s.add_argument("--baseline", help="model id used for the difference column (default: first checkpoint)")
    c = sub.add_parser("corrupt", parents=[common])
    c.add_argument("--eval", metavar="CHECKPOINT", help="evaluate this checkpoint on the generated sets")
    c.add_argument("--attacked", action="store_true", help="also evaluate with PGD on top of the corruptions")
    m = sub.add_parser("report-merge", parents=[common])
    m.add_argument("reports", nargs="+")
    return p


COMMANDS = {"train": cmd_train, "pretrain": cmd_pretrain, "eval": cmd_eval, "sweep": cmd_sweep,
            "corrupt": cmd_corrupt}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if args.command == "report-merge":
            cmd_report_merge(args)
            return 0
        cfg = load_config(args.config, args.overrides, seed=args.seed)
        COMMANDS[args.command](cfg, args)
    except (ConfigError, CliError, FileNotFoundError, ValueError, OSError) as e:
        print(f"ssadv {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
