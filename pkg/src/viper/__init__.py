"""Value iteration with perturbed rewards for offline reinforcement learning."""

from .algorithms import (NetConfig, Policy, ViperConfig, linlcb_fit, lingreedy_fit, load_policy,
                         neuralcb_fit, neuralgreedy_fit, policy_action, save_policy, viper_fit)
from .envs import (BanditFeatures, MdpFeatures, make_bandit_task, make_hard_linear_mdp)
from .errors import ConfigError, DomainError, FormatError, NumericError, ViperError
from .eval import exact_values, subopt_bandit_mc, subopt_mdp
from .offline_data import collect_bandit_data, collect_mdp_data
from .uq import ensemble_size

__all__ = [
    "BanditFeatures", "ConfigError", "DomainError", "FormatError", "MdpFeatures", "NetConfig",
    "NumericError", "Policy", "ViperConfig", "ViperError", "collect_bandit_data", "collect_mdp_data",
    "ensemble_size", "exact_values", "linlcb_fit", "lingreedy_fit", "load_policy",
    "make_bandit_task", "make_hard_linear_mdp", "neuralcb_fit", "neuralgreedy_fit",
    "policy_action", "save_policy", "subopt_bandit_mc", "subopt_mdp", "viper_fit",
]
