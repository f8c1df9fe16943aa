"""Denoising-based contractive imitation learning on toy environments."""

from .envs import (
    Environment, NormStats, PointMassCrossingEnv, SinusoidEnv, Transition, TrajectoryDataset,
    add_gaussian_noise, denormalize, generate_dataset, make_env, normalize,
    pointmass_crossing_env, sinusoid_env,
)
from .models import (
    BaselinePolicy, DenoisingPolicy, DynamicsModel, TrainConfig, load_model, train_baseline,
    train_denoiser, train_dynamics,
)
from .nn import AdamState, NetParams, adam_step, backward, forward, init_net, mse_loss
from .rollout import BaselineAgent, DecilAgent, ExpertAgent, decil_step, evaluate, rollout

__version__ = "0.1.0"
