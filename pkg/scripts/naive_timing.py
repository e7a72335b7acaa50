"""Wall clock and price RMSE of the kernel pipeline against direct exponential regression.

Sweeps the reduced dimension ``d`` on one noisy synthetic benchmark and
prints a table; the naive search starts from the reduced model's rates.

    python3 scripts/naive_timing.py --days 252 --d 1 2 3
"""
import argparse

import numpy as np

from discount_kernel.cli import run_comparison
from discount_kernel.curve_fit import FitConfig
from discount_kernel.data_io import SyntheticSpec, generate_synthetic
from discount_kernel.kernels import KernelSpec
from discount_kernel.reduce import OptimizerConfig


def parse_args():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--days", type=int, default=252)
    ap.add_argument("--noise", type=float, default=0.05)
    ap.add_argument("--d", type=int, nargs="+", default=[1, 2])
    ap.add_argument("--alpha", type=float, default=0.2)
    ap.add_argument("--beta", type=float, default=0.01)
    ap.add_argument("--ridge", type=float, default=0.1)
    ap.add_argument("--seed", type=int, default=0)
    return ap.parse_args()


def main():
    args = parse_args()
    sigma = 0.05 * (np.eye(3) - np.ones((3, 3)) / 3)
    ds = generate_synthetic(SyntheticSpec(n_days=args.days, price_noise_sd=args.noise,
                                          sigma_true=tuple(sigma.ravel()), seed=args.seed))
    config = FitConfig(KernelSpec(args.alpha, args.beta), args.ridge)
    print(f"{'d':>3} {'fit s':>7} {'reduce s':>9} {'naive s':>8} {'P-RMSE kernel':>14} {'reduced':>9} {'naive':>9}")
    for d in args.d:
        res = run_comparison(ds.systems, config, d, OptimizerConfig(seed=args.seed))
        rows = np.array([r[1:] for r in res["rows"]], dtype=float)
        tm = res["timings"]
        print(f"{d:>3} {tm['kernel_fit']:>7.2f} {tm['kernel_reduce']:>9.2f} {tm['naive']:>8.2f} "
              f"{rows[:, 3].mean():>14.4f} {rows[:, 4].mean():>9.4f} {rows[:, 5].mean():>9.4f}")


if __name__ == "__main__":
    main()
