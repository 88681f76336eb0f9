"""Trajectory diffusion planning: a numpy autodiff engine, a temporal U-Net
denoiser, guided sampling and a receding-horizon planner for toy tasks."""

from .diffusion import DiffusionModel, NoiseSchedule, cosine_schedule, forward_noise, sample, training_loss
from .errors import TrajDiffError
from .guidance import Constraint, ConstraintSet, Guide, goal_inpaint_guide, quadratic_guide
from .planner import PlannerConfig, plan, run_episode, run_episodes
from .unet import DenoiserNet, ValueNet

__version__ = "0.1.0"

__all__ = [
    "Constraint",
    "ConstraintSet",
    "DenoiserNet",
    "DiffusionModel",
    "Guide",
    "NoiseSchedule",
    "PlannerConfig",
    "TrajDiffError",
    "ValueNet",
    "cosine_schedule",
    "forward_noise",
    "goal_inpaint_guide",
    "plan",
    "quadratic_guide",
    "run_episode",
    "run_episodes",
    "sample",
    "training_loss",
]
