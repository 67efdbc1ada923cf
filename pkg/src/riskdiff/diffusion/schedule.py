"""DDPM noise schedule.

Arrays are indexed by diffusion step ``t = 0..T``; index 0 is the clean
sample (``alpha_bar[0] == 1``, ``beta[0] == 0``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha_step: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @classmethod
    def linear(cls, T: int = 50, beta_start: float | None = None, beta_end: float | None = None):
        """Linear betas. By default the 1e-4..0.02 endpoints are rescaled by ``min(1000/T, 25)``.

        The rescaling keeps ``alpha_bar[T]`` near zero when T is small; the
        cap keeps the last beta at or below 0.5.
        """
        if T < 1:
            raise ValueError("T must be >= 1")
        scale = min(1000.0 / T, 25.0)
        beta_start = 1e-4 * scale if beta_start is None else beta_start
        beta_end = 0.02 * scale if beta_end is None else beta_end
        betas = np.linspace(beta_start, beta_end, T)
        return cls.from_betas(betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=float)
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        T = len(betas)
        beta = np.concatenate([[0.0], betas])
        alpha_step = 1.0 - beta
        alpha_bar = np.cumprod(alpha_step)
        # posterior std of q(u^{t-1} | u^t, u^0); zero at t = 1
        sigma = np.zeros(T + 1)
        sigma[1:] = np.sqrt(beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]))
        for arr in (beta, alpha_step, alpha_bar, sigma):
            arr.flags.writeable = False
        return cls(T, beta, alpha_step, alpha_bar, sigma)

    def check_t(self, t: int, lo: int = 0) -> int:
        if not lo <= t <= self.T:
            raise ValueError(f"diffusion step {t} outside [{lo}, {self.T}]")
        return int(t)


def forward_noise(u0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(alpha_bar) * u0 + sqrt(1 - alpha_bar) * eps``."""
    t = schedule.check_t(t)
    u0 = np.asarray(u0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    if eps.shape != u0.shape:
        raise ValueError(f"eps shape {eps.shape} does not match u0 {u0.shape}")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * u0 + np.sqrt(1.0 - ab) * eps


def forward_noise_batch(u0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Vectorized forward noising with one step index per row of ``u0``."""
    ab = schedule.alpha_bar[np.asarray(t)].reshape((-1,) + (1,) * (u0.ndim - 1))
    return np.sqrt(ab) * u0 + np.sqrt(1.0 - ab) * eps
