"""Safe CoR: constraint-reward shaping for Lagrangian safe reinforcement learning."""

from .cmdp import CmdpSpec, StepRecord, Trajectory, constraint_limit, discounted_sum, trajectory_returns
from .cor import (CorParams, CorScorer, DemoSet, annotate_cor, augment, build_demo_set, cor,
                  load_demo_set, save_demo_set, set_distance)
from .envs import (ChainCMDP, ChainCmdpConfig, PointGoalMini, PointGoalMiniConfig,
                   exact_policy_evaluation, make_env)
from .nets import GaussianPolicy, ValueNet, load_checkpoint, save_checkpoint
from .trainer import LagrangeState, TrainerConfig, compute_gae, train

__version__ = "0.1.0"
