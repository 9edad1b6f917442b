"""Leave-one-time-slice-out sweep on the six-slice synthetic simulation.

Each slice is held out in turn, the model is fitted on the other five and
scored on the held-out one; prints per-slice and aggregate error statistics
and the skill ratio against the baseline-only prediction.
"""

import argparse
import logging
import time

from paleofield.benchmarks import LOO_SYNTH, LOO_TRAIN, prepare
from paleofield.training import aggregate, sweep_leave_one_out, with_overrides


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=LOO_TRAIN.epochs)
    ap.add_argument("--num-spatial", type=int, default=LOO_TRAIN.num_spatial)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    logging.getLogger("jax").setLevel(logging.WARNING)
    cfg = with_overrides(LOO_TRAIN, epochs=args.epochs, num_spatial=args.num_spatial)
    data = prepare(LOO_SYNTH)
    t0 = time.perf_counter()
    results = sweep_leave_one_out(cfg, data.train, data.train[:0], data.baseline,
                                  simulation_id=LOO_SYNTH.simulation_id)
    for age, r in results:
        print(f"age {age:7.0f}: mean error {r.mean_error:+.3f}, MAE {r.mean_abs_error:.3f}, "
              f"prior MAE {r.prior_mae:.3f}, coverage 3 std {r.coverage[3]:.3f}")
    agg = aggregate(results)
    print(f"aggregate: mean error {agg.mean_error:+.4f}, MAE {agg.mean_abs_error:.4f}, prior MAE {agg.prior_mae:.4f}, "
          f"skill ratio {agg.prior_mae / agg.mean_abs_error:.2f}, time {time.perf_counter() - t0:.0f} s")


if __name__ == "__main__":
    main()
