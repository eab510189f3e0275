"""Offline learning on the two-state hard linear MDP.

The environment has two states and one hundred actions. Only action 0 in
state 0 pays well. In state 0 the logging policy only ever plays actions 0
and 1, so most of the action space is never observed there. A greedy learner
trusts its extrapolation to unseen actions; pessimistic learners do not.

Run with ``python3 demos/01_hard_linear_mdp.py``; it takes a few seconds.
"""

import numpy as np

from viper import (MdpFeatures, ViperConfig, collect_mdp_data, exact_values, lingreedy_fit, linlcb_fit,
                   make_hard_linear_mdp, subopt_mdp, viper_fit)

H, K, SEEDS = 20, 1000, range(10)

# The instance is fixed by a seed, which draws the step-wise transition bits.
spec = make_hard_linear_mdp(H, seed=0)
V, Q = exact_values(spec)
print(f"optimal value from each start state: {V[0].round(3)}")
print(f"best action at step 1: {Q[0].argmax(axis=1)}")

# The logging policy picks action 0 with probability 0.6 in both states.
ds = collect_mdp_data(spec, K, seed=1)
print(f"\nlogged {ds.K} trajectories of {ds.H} steps")
print(f"distinct actions seen in state 0: {np.unique(ds.actions[ds.states == 0])}")

# Each learner runs backward over the steps and returns a greedy policy.
# Lin-VIPeR fits M ridge regressions on noisy copies of the targets and
# acts on their minimum, which plays the role of an explicit bonus.
learners = {
    "LinGreedy": lambda ds, f, s: lingreedy_fit(ds, f),
    "LinLCB (beta=2)": lambda ds, f, s: linlcb_fit(ds, f, beta=2.0),
    "Lin-VIPeR (sigma=1, M=20)": lambda ds, f, s: viper_fit(ds, f, "linear",
                                                             ViperConfig(M=20, sigma=1.0, seed=s))[1],
}

print(f"\nmean suboptimality over {len(SEEDS)} instances (H={H}, K={K}):")
for name, fit in learners.items():
    gaps = []
    for seed in SEEDS:
        spec = make_hard_linear_mdp(H, seed=seed)
        data = collect_mdp_data(spec, K, seed=10_000 + seed)
        gaps.append(subopt_mdp(spec, fit(data, MdpFeatures(spec), seed)))
    print(f"  {name:28s} {np.mean(gaps):.3f} +/- {np.std(gaps, ddof=1) / np.sqrt(len(gaps)):.3f}")
