"""Why an ensemble minimum behaves like a lower confidence bound.

Perturbing the regression targets with N(0, sigma^2) noise and shifting the
regularizer anchor makes the ridge solution a draw from
N(theta_hat, sigma^2 Lambda^{-1}). One draw undershoots the mean by a full
standard deviation with probability Phi(-1), about 0.16; the minimum of M
draws does so almost surely once M is large enough.

Run with ``python3 demos/03_uncertainty.py``; it finishes in seconds.
"""

import numpy as np

from viper import ensemble_size, models, uq
from viper.envs import sample_sphere
from viper.eval import anti_concentration_test, gaussian_law_test

rng = np.random.default_rng(0)
X, y = rng.standard_normal((20, 3)), rng.standard_normal(20)

print("perturbed ridge solutions follow the Gaussian law:")
for sigma in (0.5, 1.0):
    rep = gaussian_law_test(X, y, lam=1.0, sigma=sigma, n_draws=100_000, seed=1)
    print("  " + " | ".join(rep.lines()))

print("\nensemble size needed for the minimum to undershoot (delta = 0.1):")
for H, S, A in [(1, 1, 50), (20, 2, 100), (80, 2, 100)]:
    print(f"  H={H:2d} S={S} A={A:3d}  ->  M = {ensemble_size(0.1, H, S, A)}")

acc = uq.CovarianceAccumulator(3, 1.0).update_many(X)
rep = anti_concentration_test(acc, rng.standard_normal(3), sigma=1.0, n_trials=10_000, seed=2)
print("\n" + "\n".join(rep.lines()))

# The same picture holds for wide networks through the neural tangent kernel.
print("\nempirical NTK at initialization vs its infinite-width limit:")
x, xp = sample_sphere(rng, 2, 8)
for m in (64, 1024, 65536):
    p = models.symmetric_init(m, 8, seed=3)
    print(f"  m={m:6d}  {uq.empirical_ntk(p, x, xp):.4f}  (limit {uq.ntk_closed_form(x, xp):.4f})")

G = uq.ntk_gram(sample_sphere(rng, 16, 8))
print(f"\neffective dimension of 16 random contexts (lambda=1): {uq.effective_dimension(G, 1.0):.3f}")
