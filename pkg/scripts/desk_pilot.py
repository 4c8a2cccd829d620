"""Pinned regression run: T0 on the desk setup (one seed) should reach a
validation TA of at least 55%.

    python3 scripts/desk_pilot.py --data $SSADV_DATA --out runs/desk-pilot
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from ssadv.attacks import AttackConfig
from ssadv.experiments import DeskSetup, desk_data
from ssadv.models import ArchConfig
from ssadv.training import TrainConfig, TrainMode, adv_train

PINNED_VAL_TA = 55.0


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="runs/desk-pilot")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup = DeskSetup()
    train, val, _ = desk_data(args.data, setup, args.seed)
    cfg = TrainConfig(epochs=setup.epochs, batch_size=setup.batch_size, seed=args.seed,
                      mode=TrainMode("T0", 0.0, AttackConfig("linf", 8 / 255, 2 / 255, setup.steps)))
    res = adv_train(cfg, train, val, arch=ArchConfig("tiny-cnn", 1.0, (3, 32, 32), 10, 4), out_dir=args.out)
    ok = res.best_val_ta >= PINNED_VAL_TA
    Path(args.out, "summary.json").write_text(json.dumps({"pass": ok, "best_val_ta": res.best_val_ta,
                                                           "best_epoch": res.best_epoch}))
    print(f"{'PASS' if ok else 'FAIL'}: best validation TA {res.best_val_ta:.2f} (>= {PINNED_VAL_TA})")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
