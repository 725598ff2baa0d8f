"""Error of the coarse-step IDM against the 0.2 s reference over the cut-in distribution.

    python3 scripts/fidelity_gap.py --samples 20000
"""
import argparse

import numpy as np

from mfreliability.problems import CUTIN_DISTRIBUTION, IdmParams, idm_cost, idm_min_range_batch


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=20000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--delta", type=float, default=3.0)
    args = ap.parse_args()

    X = CUTIN_DISTRIBUTION.sample(args.samples, np.random.default_rng(args.seed))
    ref = idm_min_range_batch(IdmParams(dt=0.2), X[:, 0], X[:, 1])
    print(f"{'dt':>5} {'cost':>7} {'mean|err|':>10} {'max|err|':>9} {'P(fail)':>9} {'label flips':>11}")
    for dt in (0.2, 0.5, 1.0, 2.0, 5.0):
        y = idm_min_range_batch(IdmParams(dt=dt), X[:, 0], X[:, 1])
        err = np.abs(y - ref)
        flips = np.mean((y < args.delta) != (ref < args.delta))
        print(f"{dt:>5g} {idm_cost(dt) / idm_cost(0.2):>7.3g} {err.mean():>10.3f} {err.max():>9.3f} "
              f"{np.mean(y < args.delta):>9.5f} {flips:>11.5f}")


if __name__ == "__main__":
    main()
