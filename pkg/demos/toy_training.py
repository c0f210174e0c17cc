"""Baseline vs SDNIA on the shapes toy problem.

Small by default so it finishes in a couple of minutes; pass --full for
the acceptance-sized run (about 15 minutes on one CPU core).
"""

import argparse
import logging

from sdnia.experiments import ToySetup, toy_comparison

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true")
args = ap.parse_args()
logging.basicConfig(level=logging.WARNING)

setup = ToySetup() if args.full else ToySetup(n_train=60, n_val=20, n_test=20, epochs=8)
res = toy_comparison(setup, variants=("baseline", "sdnia"))
print(f"{'variant':10s} {'clean':>7s} {'fog':>7s} {'gamma':>7s} {'degraded':>9s} {'time':>7s}")
for name, r in res.items():
    print(f"{name:10s} {100 * r['clean']:7.1f} {100 * r['fog']:7.1f} {100 * r['gamma']:7.1f} "
          f"{100 * r['degraded']:9.1f} {r['seconds']:6.0f}s")
