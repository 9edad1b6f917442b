"""Wall time of one training iteration as M_s and M_t vary.

Prints step times at M_s in {25, 50, 100} (fixed M_t) with the ratio to the
cubic trend anchored at M_s = 25, then the effect of doubling M_t.
"""

import argparse

from paleofield.benchmarks import step_time


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--batch-size", type=int, default=1000)
    ap.add_argument("--num-temporal", type=int, default=6)
    args = ap.parse_args()
    base = None
    for M in (25, 50, 100):
        t = step_time(M, args.num_temporal, args.batch_size)
        base = base or t
        print(f"M_s = {M:3d}: {t * 1e3:8.1f} ms   t / t(25) = {t / base:6.2f}   cubic trend = {(M / 25) ** 3:5.0f}")
    for M_t in (args.num_temporal, 2 * args.num_temporal, 4 * args.num_temporal):
        print(f"M_s = 50, M_t = {M_t:3d}: {step_time(50, M_t, args.batch_size) * 1e3:8.1f} ms")


if __name__ == "__main__":
    main()
