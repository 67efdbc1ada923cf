"""Conditioning context, normalization and the training dataset."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..risk import Pose, RiskMap

N_WAYPOINTS = 8
PATCH_SIZE = 5
PATCH_POOL = 4  # fine samples per patch cell, per axis
PATCH_FORWARD = (-0.4, 1.6)  # meters, robot frame
PATCH_LATERAL = (-1.0, 1.0)
PATCH_CAP = 2.0  # risk patch values are rho / gamma, capped
CONTEXT_DIM = 4 + PATCH_SIZE * PATCH_SIZE


def risk_patch(risk_map: RiskMap, pose: Pose, gamma: float | None = None) -> np.ndarray:
    """Max-pooled ``rho / gamma`` on a robot-aligned window, shape (5, 5).

    Rows run forward from behind the robot, columns from right to left.
    Off-grid samples read as the cap.
    """
    gamma = risk_map.config.gamma if gamma is None else gamma
    n = PATCH_SIZE * PATCH_POOL
    fx = np.linspace(*PATCH_FORWARD, n + 1)[:-1] + (PATCH_FORWARD[1] - PATCH_FORWARD[0]) / (2 * n)
    fy = np.linspace(*PATCH_LATERAL, n + 1)[:-1] + (PATCH_LATERAL[1] - PATCH_LATERAL[0]) / (2 * n)
    FX, FY = np.meshgrid(fx, fy, indexing="ij")
    local = np.stack([FX.ravel(), FY.ravel()], axis=-1)
    world = pose.position + local @ pose.rotation().T
    spec = risk_map.spec
    cells = spec.world_to_cell(world)
    ok = spec.in_bounds(cells)
    vals = np.full(len(world), PATCH_CAP)
    scale = max(gamma, 1e-9)
    vals[ok] = np.minimum(risk_map.rho[cells[ok, 1], cells[ok, 0]] / scale, PATCH_CAP)
    fine = vals.reshape(n, n)
    return fine.reshape(PATCH_SIZE, PATCH_POOL, PATCH_SIZE, PATCH_POOL).max(axis=(1, 3))


def build_context(risk_map: RiskMap, pose: Pose, goal) -> np.ndarray:
    """Context vector: goal offset in the robot frame, (sin, cos) heading, risk patch."""
    offset = (np.asarray(goal, dtype=float) - pose.position) @ pose.rotation()
    heading = [math.sin(pose.theta), math.cos(pose.theta)]
    return np.concatenate([offset, heading, risk_patch(risk_map, pose).ravel()])


@dataclass(frozen=True)
class Normalizer:
    """Per-coordinate affine map ``(x - mean) / scale``."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x, min_std: float = 1e-6) -> "Normalizer":
        x = np.asarray(x, dtype=float)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        # constant coordinates keep unit scale
        scale = np.where(std > min_std, std, 1.0)
        return cls(mean, scale)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    def normalize(self, x):
        return (np.asarray(x, dtype=float) - self.mean) / self.scale

    def unnormalize(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.mean


@dataclass
class Dataset:
    """Flattened training pairs: ``contexts (M, C)`` and ``actions (M, N_u, 2)`` in meters."""

    contexts: np.ndarray
    actions: np.ndarray
    action_norm: Normalizer
    context_norm: Normalizer

    @classmethod
    def from_pairs(cls, contexts, actions) -> "Dataset":
        contexts = np.asarray(contexts, dtype=float)
        actions = np.asarray(actions, dtype=float)
        if len(actions) == 0:
            raise ValueError("dataset is empty")
        if actions.ndim != 3 or actions.shape[2] != 2:
            raise ValueError(f"actions must have shape (M, N_u, 2), got {actions.shape}")
        if len(contexts) != len(actions):
            raise ValueError("contexts and actions differ in length")
        if not (np.all(np.isfinite(contexts)) and np.all(np.isfinite(actions))):
            raise ValueError("dataset contains non-finite values")
        flat = actions.reshape(len(actions), -1)
        return cls(contexts, actions, Normalizer.fit(flat), Normalizer.fit(contexts))

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def n_waypoints(self) -> int:
        return self.actions.shape[1]

    def normalized(self):
        flat = self.actions.reshape(len(self), -1)
        return self.context_norm.normalize(self.contexts), self.action_norm.normalize(flat)
