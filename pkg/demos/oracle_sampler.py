"""Drive the production sampler with an exact Gaussian denoiser.

With the true posterior mean plugged in, any deviation of the samples from
the prior is sampler error. Prints KS distances, the point-mass endpoint
error and the error decay as the step count doubles.

    python demos/oracle_sampler.py --samples 4000
"""
import argparse

import numpy as np

from cthdiff.diffusion import DiffusionConfig, sample_ode
from cthdiff.oracle import (GaussianPrior, analytic_denoiser, ks_statistic, normal_cdf, oracle_sample,
                            point_mass_exact)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=4000)
    ap.add_argument("--steps", type=int, default=50)
    args = ap.parse_args()

    x = oracle_sample(GaussianPrior.standard(), args.steps, args.samples, seed=0)
    ks = [ks_statistic(x[:, d], normal_cdf()) for d in range(x.shape[1])]
    print(f"N(0, 1) prior, {args.steps} Heun steps, {args.samples} samples")
    print(f"  sample mean {x.mean():+.4f}  sample std {x.std():.4f}  max KS {max(ks):.4f}")

    m = np.linspace(-1, 1, 68)
    pm = oracle_sample(GaussianPrior.point_mass(m), args.steps, 64, seed=1)
    print(f"point-mass prior: max endpoint error {np.abs(pm - m).max():.2e}")

    cfg = DiffusionConfig()
    prior = GaussianPrior(np.zeros(68), np.full(68, 0.1))
    z = np.random.default_rng(2).standard_normal((64, 68))
    exact = point_mass_exact(0.0, 0.1, cfg.sigma_max * z, cfg.sigma_max)
    print("narrow prior (std 0.1), Heun error vs steps:")
    prev = None
    for n in (16, 32, 64, 128):
        err = np.abs(sample_ode(lambda v, s: analytic_denoiser(prior, v, s), z, cfg, n) - exact).max()
        ratio = f"  ratio {prev / err:.2f}" if prev else ""
        print(f"  N={n:<4d} error {err:.3e}{ratio}")
        prev = err


if __name__ == "__main__":
    main()
