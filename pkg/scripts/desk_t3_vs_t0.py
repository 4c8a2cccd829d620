"""Directional check: attacking both batches with the combined loss (T3)
is at least as robust as plain adversarial training (T0) without gaining
more than one point of clean accuracy.

Same setup as desk_lambda_sweep.py with lambda1 = lambda2 = 1.

    python3 scripts/desk_t3_vs_t0.py --data $SSADV_DATA --out runs/desk-t3
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from ssadv.experiments import T3_ARMS, T3_EPS, DeskSetup, run_comparison, t3_verdict


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True, help="directory holding the CIFAR-10 binary batches")
    p.add_argument("--out", default="runs/desk-t3")
    p.add_argument("--epochs", type=int, default=DeskSetup.epochs)
    p.add_argument("--seeds", type=int, nargs="+", default=list(DeskSetup.seeds))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup = DeskSetup(epochs=args.epochs, seeds=tuple(args.seeds))
    summary = run_comparison(T3_ARMS, setup, args.data, T3_EPS, cache_dir=args.out)
    ok, detail = t3_verdict(summary)
    Path(args.out, "summary.json").write_text(json.dumps({"pass": ok, "detail": detail, "medians": summary}, indent=2))
    print(("PASS" if ok else "FAIL") + ": " + detail)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
