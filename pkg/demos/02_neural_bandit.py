"""Neural VIPeR on a contextual bandit with a nonlinear reward.

The mean reward of action ``a`` in context ``s`` is ``cos(3 s.theta_a)``, so
no linear function of the block-embedded context ranks the actions well. A
wide two-layer ReLU network trained by gradient descent from a symmetric
initialization can.

Run with ``python3 demos/02_neural_bandit.py``; it takes about ten seconds.
"""

import time

import numpy as np

from viper import (BanditFeatures, NetConfig, ViperConfig, collect_bandit_data, linlcb_fit, make_bandit_task,
                   neuralgreedy_fit, subopt_bandit_mc, viper_fit)
from viper.eval import eval_states

task = make_bandit_task("cos", dim=16, n_actions=10, seed=0)
feat = BanditFeatures(task)

# Half of the logged actions are optimal; the rest are uniform.
ds = collect_bandit_data(task, 1000, seed=100)
states = eval_states(task, 1000, seed=0)
print(f"context dim {task.dim}, {task.n_actions} actions, input dim after embedding {feat.dim}")


def report(name, fit):
    t0 = time.perf_counter()
    policy = fit()
    mean, se = subopt_bandit_mc(task, policy, states=states)
    print(f"  {name:38s} subopt {mean:.4f} +/- {se:.4f}   fit {time.perf_counter() - t0:5.1f} s")
    return policy


print("\nsuboptimality on 1000 fresh contexts:")
report("LinLCB (beta=0.1)", lambda: linlcb_fit(ds, feat, beta=0.1))
report("Lin-VIPeR (sigma=0.1, M=10)",
       lambda: viper_fit(ds, feat, "linear", ViperConfig(M=10, sigma=0.1))[1])
report("NeuralGreedy (m=64)", lambda: neuralgreedy_fit(ds, feat, NetConfig(width=64, J=1000)))
policy = report("Neural-VIPeR (m=64, sigma=0.1, M=10)",
                lambda: viper_fit(ds, feat, "neural", ViperConfig(M=10, sigma=0.1, J=1000, width=64))[1])

# Acting only needs M forward passes; no covariance matrix is stored.
q = policy.q_values(1, states[:3])
print("\nensemble-minimum values for three contexts:\n", np.round(q, 3))
print("chosen actions:", policy.act(1, states[:3]))
