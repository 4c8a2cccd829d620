"""Directional check: a larger self-supervision weight in the parameter
update raises clean accuracy and lowers robust accuracy.

tiny-cnn, 10k CIFAR-10 training images, linf eps_train = 8/255, K = 10,
20 epochs, seeds 0-2; compares T1 with lambda1 = 0 and lambda1 = 2.

    python3 scripts/desk_lambda_sweep.py --data $SSADV_DATA --out runs/desk-lambda
"""
import argparse
import json
import logging
import sys
from pathlib import Path

from ssadv.experiments import LAMBDA_ARMS, LAMBDA_EPS, DeskSetup, lambda_verdict, run_comparison


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--data", required=True, help="directory holding the CIFAR-10 binary batches")
    p.add_argument("--out", default="runs/desk-lambda")
    p.add_argument("--epochs", type=int, default=DeskSetup.epochs)
    p.add_argument("--seeds", type=int, nargs="+", default=list(DeskSetup.seeds))
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    setup = DeskSetup(epochs=args.epochs, seeds=tuple(args.seeds))
    summary = run_comparison(LAMBDA_ARMS, setup, args.data, LAMBDA_EPS, cache_dir=args.out)
    ok, detail = lambda_verdict(summary)
    Path(args.out, "summary.json").write_text(json.dumps({"pass": ok, "detail": detail, "medians": summary}, indent=2))
    print(("PASS" if ok else "FAIL") + ": " + detail)
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
