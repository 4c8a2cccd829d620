"""Clean accuracy, PGD robust accuracy sweeps, corruption accuracy and CSV reports."""
from __future__ import annotations

import csv
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, check_in_ball, default_alpha, pgd_attack

L2_EPS_GRID = (0.0, 0.01, 0.03, 0.05, 0.07, 0.1, 0.25, 0.5, 0.75, 1.0, 2.0, 3.0)
LINF_EPS_GRID = tuple(k / 255 for k in range(11))
REPORT_VERSION = 1
REPORT_FIELDS = (
    "model_id", "norm", "eps_train", "mode", "lambda1", "lambda2",
    "condition", "eps_test", "severity", "accuracy", "n_samples", "seed",
)
KEY_FIELDS = tuple(f for f in REPORT_FIELDS if f != "accuracy")


def default_eps_grid(norm: str) -> list[float]:
    return list(L2_EPS_GRID if norm == "l2" else LINF_EPS_GRID)


def _predict(model, X) -> np.ndarray:
    with T.no_grad():
        return model.predict_sup(X, update_stats=False).data.argmax(axis=1)


def _frozen(model):
    was = getattr(model, "training", False)
    model.eval()
    return was


def eval_standard(model, ds, batch_size: int = 256) -> float:
    """Top-1 accuracy in percent; argmax ties resolve to the lowest index."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    was = _frozen(model)
    try:
        correct = sum(int((_predict(model, X) == y).sum()) for X, y in ds.batches(batch_size))
    finally:
        if was:
            model.train()
    return 100.0 * correct / len(ds)


def ss_accuracy(model, ds, task, seed: int = 0, batch_size: int = 256) -> float:
    """Pretext-task accuracy on freshly transformed copies of ``ds``."""
    rng = np.random.default_rng(seed)
    was = _frozen(model)
    correct = 0
    try:
        for X, _ in ds.batches(batch_size):
            X_ss, y_ss = task.apply(X, rng)
            with T.no_grad():
                correct += int((model.predict_ss(X_ss, update_stats=False).data.argmax(1) == y_ss).sum())
    finally:
        if was:
            model.train()
    return 100.0 * correct / len(ds)


def eval_attack_config(base: AttackConfig, epsilon: float, steps: int = 20) -> AttackConfig:
    """Test-time attack: supervised loss only, step size from the norm rule."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return dataclasses.replace(
        base, epsilon=float(epsilon), steps=steps, alpha=default_alpha(base.norm, epsilon, steps),
        use_ss_loss=False, attack_ss=False,
    )


def robust_accuracy(model, ds, cfg: AttackConfig, rng: np.random.Generator, batch_size: int = 256,
                    restarts: int = 1) -> float:
    """Percent of ``ds`` still classified correctly after the attack. With
    ``restarts > 1`` a sample must survive every random start."""
    if restarts < 1:
        raise ValueError(f"restarts must be at least 1, got {restarts}")
    if len(ds) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if cfg.use_ss_loss:
        raise ValueError("test-time attacks use the supervised loss only")
    if cfg.epsilon == 0:
        return eval_standard(model, ds, batch_size)
    was = _frozen(model)
    correct = 0
    try:
        for X, y in ds.batches(batch_size):
            alive = np.ones(len(y), dtype=bool)
            for _ in range(restarts if cfg.random_start else 1):
                adv = pgd_attack(model, X, y, cfg, rng, compute_losses=False)
                check_in_ball(adv.x_adv, X, cfg.epsilon, cfg.norm)
                alive &= _predict(model, adv.x_adv) == y
            correct += int(alive.sum())
    finally:
        if was:
            model.train()
    return 100.0 * correct / len(ds)


def eval_robust(model, ds, eps_list, base: AttackConfig, seed: int = 0, steps: int = 20,
                batch_size: int = 256, restarts: int = 1) -> dict[float, float]:
    """Robust accuracy for each epsilon; epsilon 0 is the clean accuracy."""
    if base.use_ss_loss:
        raise ValueError("test-time attacks use the supervised loss only")
    out = {}
    for eps in eps_list:
        cfg = eval_attack_config(base, eps, steps)
        out[float(eps)] = robust_accuracy(model, ds, cfg, np.random.default_rng(seed), batch_size, restarts)
    return out


def eval_corruptions(model, sets, attacked: bool = False, base: AttackConfig | None = None, seed: int = 0,
                     steps: int = 20, batch_size: int = 256, restarts: int = 1):
    """Accuracy per ``(corruption, severity)`` plus the mean over all cells."""
    cells = {}
    for cs in sets:
        if attacked:
            cfg = eval_attack_config(base, base.epsilon, steps)
            acc = robust_accuracy(model, cs.dataset, cfg, np.random.default_rng(seed), batch_size, restarts)
        else:
            acc = eval_standard(model, cs.dataset, batch_size)
        cells[(cs.corruption, cs.severity)] = acc
    mean = float(np.mean(list(cells.values()))) if cells else float("nan")
    return cells, mean


# --- reports ---------------------------------------------------------------

@dataclass
class EvalRow:
    model_id: str
    norm: str
    eps_train: float
    mode: str
    lambda1: float
    lambda2: float
    condition: str
    eps_test: float
    severity: int
    accuracy: float
    n_samples: int
    seed: int

    def key(self) -> tuple:
        return tuple(_fmt(f, getattr(self, f)) for f in KEY_FIELDS)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def add(self, row: EvalRow) -> None:
        if not 0 <= row.accuracy <= 100:
            raise ValueError(f"accuracy {row.accuracy} outside [0, 100]")
        self.rows.append(row)


def _fmt(name, v) -> str:
    if name == "accuracy":
        return f"{v:.2f}"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_row(d: dict) -> EvalRow:
    kw = {}
    for f in dataclasses.fields(EvalRow):
        raw = d[f.name]
        kw[f.name] = int(raw) if f.type == "int" else float(raw) if f.type == "float" else raw
    return EvalRow(**kw)


def read_report(path) -> EvalReport:
    with open(path, newline="", encoding="utf-8") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return EvalReport([_parse_row(r) for r in csv.DictReader(lines)])


def emit_report(report: EvalReport, path, append: bool = True, extra: dict[str, list] | None = None) -> Path:
    """Write ``report`` as CSV. With ``append``, rows already in the file are
    kept unless a new row has the same key, which replaces them.

    ``extra`` adds trailing columns (one value per row of ``report``); it is
    only valid when not appending.
    """
    path = Path(path)
    rows = list(report.rows)
    if append and path.exists() and extra is None:
        new_keys = {r.key() for r in rows}
        rows = [r for r in read_report(path).rows if r.key() not in new_keys] + rows
    header = list(REPORT_FIELDS) + list(extra or {})
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            f.write(f"# ssadv-report v{REPORT_VERSION}\n")
            w = csv.writer(f)
            w.writerow(header)
            for i, r in enumerate(rows):
                vals = [_fmt(n, getattr(r, n)) for n in REPORT_FIELDS]
                vals += [_fmt("accuracy", col[i]) for col in (extra or {}).values()]
                w.writerow(vals)
    except OSError as e:
        raise OSError(f"cannot write report to {path}: {e.strerror}") from e
    return path


def merge_reports(paths, out) -> EvalReport:
    merged = EvalReport()
    for p in paths:
        for r in read_report(p).rows:
            merged.rows.append(r)
    dedup = {}
    for r in merged.rows:
        dedup[r.key()] = r
    merged.rows = list(dedup.values())
    emit_report(merged, out, append=False)
    return merged


def difference_vs_baseline(report: EvalReport, baseline_id: str) -> list[float]:
    """``Acc(row) - Acc(baseline at the same condition)`` for every row."""
    base = {(r.condition, r.eps_test, r.severity): r.accuracy for r in report.rows if r.model_id == baseline_id}
    out = []
    for r in report.rows:
        b = base.get((r.condition, r.eps_test, r.severity))
        out.append(float("nan") if b is None else round(r.accuracy, 2) - round(b, 2))
    return out


def write_figure_data(report: EvalReport, baseline_id: str, path) -> None:
    """One row per epsilon, one column per model: ``Acc(model) - Acc(baseline)``."""
    models = sorted({r.model_id for r in report.rows})
    diffs = difference_vs_baseline(report, baseline_id)
    table: dict[float, dict[str, float]] = {}
    for r, d in zip(report.rows, diffs):
        if r.condition == "eps":
            table.setdefault(r.eps_test, {})[r.model_id] = d
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["eps_test"] + models)
        for eps in sorted(table):
            w.writerow([repr(eps)] + [f"{table[eps].get(m, float('nan')):.2f}" for m in models])
