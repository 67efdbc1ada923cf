"""Waypoint diffusion policy: schedule, denoiser, training and sampling."""

from .data import CONTEXT_DIM, N_WAYPOINTS, Dataset, Normalizer, build_context, risk_patch
from .model import (
    DenoiserParams,
    TrainConfig,
    TrainingDiverged,
    TrainResult,
    ddpm_step,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .schedule import NoiseSchedule, forward_noise
from .sampler import RiskGuide, sample

__all__ = [
    "CONTEXT_DIM", "N_WAYPOINTS", "Dataset", "Normalizer", "build_context", "risk_patch",
    "DenoiserParams", "TrainConfig", "TrainingDiverged", "TrainResult", "ddpm_step",
    "load_checkpoint", "save_checkpoint", "train", "NoiseSchedule", "forward_noise",
    "RiskGuide", "sample",
]
