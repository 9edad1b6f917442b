"""Parameter recovery and calibration on the synthetic recovery benchmark.

Fits the model to 20,000 records drawn from the prior plus noise, prints the
fitted hyperparameters next to the truth, and reports predictive coverage on
2,000 held-out records.
"""

import argparse
import logging
import time

from paleofield.benchmarks import RECOVERY_TRAIN, fitted_values, recovery_data, recovery_ratios
from paleofield.training import fit, validate, with_overrides


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=RECOVERY_TRAIN.epochs)
    ap.add_argument("--num-temporal", type=int, default=RECOVERY_TRAIN.num_temporal)
    ap.add_argument("--num-spatial", type=int, default=RECOVERY_TRAIN.num_spatial)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    logging.getLogger("jax").setLevel(logging.WARNING)
    cfg = with_overrides(RECOVERY_TRAIN, epochs=args.epochs, num_temporal=args.num_temporal,
                         num_spatial=args.num_spatial)
    data = recovery_data()
    t0 = time.perf_counter()
    model = fit(cfg, data.train, data.baseline)
    elapsed = time.perf_counter() - t0
    print(f"N_train = {len(data.train)}, fit time = {elapsed:.1f} s")
    got, ratio = fitted_values(model.hyper), recovery_ratios(model.hyper, data.truth)
    for k in got:
        print(f"{k:8s} fitted {got[k]:8.3f}  ratio to truth {ratio[k]:6.3f}")
    report = validate(model, data.test)
    print(f"held-out coverage: 1 std {report.coverage[1]:.4f}, 2 std {report.coverage[2]:.4f}, "
          f"3 std {report.coverage[3]:.4f}")
    print(report.to_text(), end="")


if __name__ == "__main__":
    main()
