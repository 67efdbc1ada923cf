"""One-dimensional guided Langevin demo.

A two-mode Gaussian mixture over a scalar position with a forbidden
interval that partly blocks one mode. Annealed Langevin dynamics on the
closed-form score is run unguided, with classifier guidance over a sweep of
penalty weights, and with the projection ladder. All chains of a run share
one vectorized generator.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logsumexp, softplus
from scipy.stats import norm

from .guidance import Classifier, Projection, Unguided

@dataclass(frozen=True)
class OneDTarget:
    """Gaussian mixture ``sum_k w_k N(mu_k, s_k^2)`` and forbidden open interval ``(a, b)``.

    ``a == b`` gives an empty forbidden set (every point is allowed).
    """

    weights: tuple = (0.5, 0.5)
    means: tuple = (-2.0, 2.0)
    stds: tuple = (0.4, 0.4)
    a: float = -0.5
    b: float = 1.5

    def __post_init__(self):
        w, m, s = (np.asarray(v, dtype=float) for v in (self.weights, self.means, self.stds))
        if not (len(w) == len(m) == len(s) >= 1):
            raise ValueError("weights, means and stds must have the same non-zero length")
        if np.any(w <= 0) or not math.isclose(float(w.sum()), 1.0, rel_tol=0, abs_tol=1e-9):
            raise ValueError("mixture weights must be positive and sum to 1")
        if np.any(s <= 0):
            raise ValueError("component stds must be positive")
        if not np.all(np.isfinite(np.concatenate([w, m, s, [self.a, self.b]]))):
            raise ValueError("target parameters must be finite")
        if self.a > self.b:
            raise ValueError(f"forbidden interval needs a <= b, got a={self.a} b={self.b}")

    def _arrays(self):
        return (np.asarray(self.weights, dtype=float), np.asarray(self.means, dtype=float),
                np.asarray(self.stds, dtype=float))

    def forbidden(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x > self.a) & (x < self.b)

    def forbidden_mass(self) -> float:
        """Probability the (noise-free) target assigns to the forbidden interval."""
        w, m, s = self._arrays()
        return float(np.sum(w * (norm.cdf((self.b - m) / s) - norm.cdf((self.a - m) / s))))

    def assign_modes(self, x) -> np.ndarray:
        """Index of the nearest component mean for each sample."""
        _, m, _ = self._arrays()
        x = np.asarray(x, dtype=float)
        return np.argmin(np.abs(x[..., None] - m), axis=-1)

    def mode_masses(self, x) -> np.ndarray:
        idx = self.assign_modes(x)
        return np.bincount(idx.ravel(), minlength=len(self.weights)) / max(idx.size, 1)


def log_density(target: OneDTarget, x, noise_level: float = 0.0) -> np.ndarray:
    """Log density of the mixture convolved with ``N(0, noise_level^2)``."""
    w, m, s = target._arrays()
    x = np.asarray(x, dtype=float)
    var = s**2 + noise_level**2
    comp = np.log(w) - 0.5 * np.log(2 * np.pi * var) - 0.5 * (x[..., None] - m) ** 2 / var
    return logsumexp(comp, axis=-1)


def analytic_score(target: OneDTarget, x, noise_level: float = 0.0) -> np.ndarray:
    """``d/dx log p_sigma(x)`` for the mixture smoothed at ``noise_level``."""
    w, m, s = target._arrays()
    x = np.asarray(x, dtype=float)
    var = s**2 + noise_level**2
    comp = np.log(w) - 0.5 * np.log(var) - 0.5 * (x[..., None] - m) ** 2 / var
    resp = np.exp(comp - logsumexp(comp, axis=-1, keepdims=True))
    return np.sum(resp * (m - x[..., None]) / var, axis=-1)


def risk_1d(target: OneDTarget, x, margin: float = 0.5):
    """Smooth interval penalty and its derivative.

    With ``d = min(x - a, b - x)`` (positive inside the interval),
    ``c = margin * softplus(d / margin) - margin * log 2``, which is negative
    exactly outside the interval. For ``a == b`` the penalty is zero.
    """
    x = np.asarray(x, dtype=float)
    if target.a == target.b:
        return np.zeros_like(x), np.zeros_like(x)
    left, right = x - target.a, target.b - x
    d = np.minimum(left, right)
    dd = np.where(left <= right, 1.0, -1.0)
    c = margin * softplus(d / margin) - margin * math.log(2.0)
    return c, expit(d / margin) * dd


_GH_NODES, _GH_WEIGHTS = np.polynomial.hermite_e.hermegauss(32)
_GH_WEIGHTS = _GH_WEIGHTS / _GH_WEIGHTS.sum()


class NoisyPenalty:
    """Penalty seen at noise level ``sigma``: ``E[c(x0) | x_sigma = x]`` and its derivative.

    The expectation is over the target's denoising posterior, a mixture of
    Gaussians ``N(m_k + g_k (x - m_k), s_k^2 sigma^2 / (s_k^2 + sigma^2))``
    with ``g_k = s_k^2 / (s_k^2 + sigma^2)``, and uses Gauss-Hermite
    quadrature. It tends to ``risk_1d`` as ``sigma -> 0`` and stays smooth
    across the interval at large noise, so guided chains can still move
    between modes.

    With ``grid_step`` set, the per-component expectations (functions of the
    posterior mean only) are tabulated once and linearly interpolated.
    """

    def __init__(self, target: OneDTarget, noise_level: float, margin: float = 0.5,
                 grid_step: float | None = None):
        self.target, self.margin = target, margin
        w, m, s = target._arrays()
        self.log_w, self.means = np.log(w), m
        self.var = s**2 + noise_level**2
        self.gain = s**2 / self.var
        self.post_std = s * noise_level / np.sqrt(self.var)
        self.table = None
        if grid_step is not None and target.a < target.b:
            pad = 10 * (margin + float(np.max(self.post_std)))
            grid = np.arange(target.a - pad, target.b + pad + grid_step, grid_step)
            self.table = (grid,) + self._expectations(np.broadcast_to(grid[:, None], (len(grid), len(m))))

    def _expectations(self, post_mean):
        nodes = post_mean[..., None] + self.post_std[:, None] * _GH_NODES
        c, dc = risk_1d(self.target, nodes, self.margin)
        return c @ _GH_WEIGHTS, dc @ _GH_WEIGHTS

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if self.target.a == self.target.b:
            return np.zeros_like(x), np.zeros_like(x)
        diff = x[..., None] - self.means
        comp = self.log_w - 0.5 * np.log(self.var) - 0.5 * diff**2 / self.var
        resp = np.exp(comp - logsumexp(comp, axis=-1, keepdims=True))
        post_mean = self.means + self.gain * diff
        if self.table is None:
            e_c, e_dc = self._expectations(post_mean)
        else:
            grid, tc, tdc = self.table
            e_c = np.stack([np.interp(post_mean[..., k], grid, tc[:, k]) for k in range(len(self.means))], -1)
            e_dc = np.stack([np.interp(post_mean[..., k], grid, tdc[:, k]) for k in range(len(self.means))], -1)
        comp_score = -diff / self.var
        score = np.sum(resp * comp_score, axis=-1, keepdims=True)
        value = np.sum(resp * e_c, axis=-1)
        grad = np.sum(resp * ((comp_score - score) * e_c + self.gain * e_dc), axis=-1)
        return value, grad


def noisy_risk_1d(target: OneDTarget, x, noise_level: float, margin: float = 0.5):
    """Exact-quadrature ``NoisyPenalty`` evaluated at ``x``."""
    return NoisyPenalty(target, noise_level, margin)(x)


@dataclass(frozen=True)
class LangevinConfig:
    """Annealed Langevin settings; level ``i`` uses step ``step_size * (sigma_i / sigma_min)^2``.

    The top level is comparable to the distance between the mixture modes,
    so chains can still change mode early in the schedule.
    """

    step_size: float = 2e-5
    steps: int = 100
    levels: tuple = tuple(np.geomspace(5.0, 0.01, 10).tolist())
    n_samples: int = 10_000
    seed: int = 0
    margin: float = 0.5
    init_std: float | None = None  # defaults to the largest noise level
    penalty_grid: float = 1e-3

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.steps < 1 or len(self.levels) < 1 or self.n_samples < 1:
            raise ValueError("steps, levels and n_samples must be non-empty")
        if any(not lv > 0 for lv in self.levels):
            raise ValueError("noise levels must be positive")
        if not self.margin > 0 or (self.init_std is not None and not self.init_std > 0):
            raise ValueError("margin and init_std must be positive")
        if not self.penalty_grid > 0:
            raise ValueError("penalty_grid must be positive")

    @property
    def start_std(self) -> float:
        return max(self.levels) if self.init_std is None else self.init_std

    @property
    def total_steps(self) -> int:
        return self.steps * len(self.levels)


@dataclass
class RunStats:
    rejections: int = 0
    interpolations: int = 0
    boundary_snaps: int = 0


def _project(x_new, x_prev, drift, alpha, t, mode: Projection, target: OneDTarget, rng,
             stats: RunStats):
    """Interval version of the rejection -> previous -> boundary ladder."""
    bad = np.flatnonzero(target.forbidden(x_new))
    if t > mode.t2:
        for _ in range(mode.max_rejections):
            if not len(bad):
                return x_new
            stats.rejections += len(bad)
            x_new[bad] = x_prev[bad] + drift[bad] + math.sqrt(2 * alpha) * rng.standard_normal(len(bad))
            bad = bad[target.forbidden(x_new[bad])]
    if t > mode.t1:
        for _ in range(mode.max_projections):
            if not len(bad):
                return x_new
            stats.interpolations += len(bad)
            x_new[bad] = (1 - mode.beta_mix) * x_new[bad] + mode.beta_mix * x_prev[bad]
            bad = bad[target.forbidden(x_new[bad])]
    if len(bad):
        stats.boundary_snaps += len(bad)
        v = x_new[bad]
        x_new[bad] = np.where(v - target.a <= target.b - v, target.a, target.b)
    return x_new


def langevin_run(target: OneDTarget, config: LangevinConfig, guidance=None, stats: RunStats | None = None):
    """Annealed Langevin samples under ``guidance`` (Unguided, Classifier or Projection).

    Projection thresholds ``t1``/``t2`` count remaining iterations, from
    ``config.total_steps`` down to 1.
    """
    guidance = guidance or Unguided()
    if not isinstance(guidance, (Unguided, Classifier, Projection)):
        raise ValueError(f"unsupported 1-D guidance {type(guidance).__name__}")
    if isinstance(guidance, Projection):
        guidance.validate(config.total_steps)
    stats = stats if stats is not None else RunStats()
    rng = np.random.default_rng(config.seed)
    x = config.start_std * rng.standard_normal(config.n_samples)
    if isinstance(guidance, Projection):
        bad = target.forbidden(x)
        x[bad] = np.where(x[bad] - target.a <= target.b - x[bad], target.a, target.b)
    sigma_min = min(config.levels)
    t = config.total_steps
    for level in config.levels:
        alpha = config.step_size * (level / sigma_min) ** 2
        if isinstance(guidance, Classifier) and guidance.eta != 0:
            penalty = NoisyPenalty(target, level, config.margin, grid_step=config.penalty_grid)
        for _ in range(config.steps):
            drift = alpha * analytic_score(target, x, level)
            if isinstance(guidance, Classifier) and guidance.eta != 0:
                drift = drift - alpha * guidance.eta * penalty(x)[1]
            x_new = x + drift + math.sqrt(2 * alpha) * rng.standard_normal(x.shape)
            if isinstance(guidance, Projection):
                x_new = _project(x_new, x, drift, alpha, t, guidance, target, rng, stats)
            x = x_new
            t -= 1
    return x


@dataclass
class DemoRun:
    label: str
    mode: str
    eta: float
    samples: np.ndarray
    target: OneDTarget
    config: LangevinConfig = field(default_factory=LangevinConfig)

    @property
    def violation_fraction(self) -> float:
        return float(np.mean(self.target.forbidden(self.samples)))

    def boundary_band_mass(self, width: float | None = None) -> float:
        """Fraction of samples within ``width`` outside either interval end (default ``2 * sigma_min``)."""
        width = 2 * min(self.config.levels) if width is None else width
        x, a, b = self.samples, self.target.a, self.target.b
        return float(np.mean(((x >= a - width) & (x <= a)) | ((x >= b) & (x <= b + width))))


def _demo_job(job):
    label, mode, eta, target, config, guidance = job
    return DemoRun(label, mode, eta, langevin_run(target, config, guidance), target, config)


def run_demo(target: OneDTarget | None = None, config: LangevinConfig | None = None,
             etas=(0.0, 1.0, 10.0, 100.0), projection: Projection | None = None,
             workers: int = 1) -> list[DemoRun]:
    """Unguided, classifier (one run per ``eta``) and projection runs from the same seed."""
    target = target or OneDTarget()
    config = config or LangevinConfig()
    projection = projection or Projection.for_schedule(config.total_steps)
    jobs = [("unguided", "none", 0.0, target, config, Unguided())]
    jobs += [(f"classifier_eta={eta:g}", "classifier", float(eta), target, config, Classifier(float(eta)))
             for eta in etas]
    jobs.append(("projection", "projection", 0.0, target, config, projection))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(_demo_job, jobs))
    return [_demo_job(j) for j in jobs]


def histogram_edges(target: OneDTarget, bins: int = 80) -> np.ndarray:
    _, m, s = target._arrays()
    lo = min(float(np.min(m - 4 * s)), target.a) - 1.0
    hi = max(float(np.max(m + 4 * s)), target.b) + 1.0
    return np.linspace(lo, hi, bins + 1)


def demo_summary_csv(runs) -> str:
    buf = io.StringIO()
    k = len(runs[0].target.weights)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "mode", "eta", "samples", "violation_fraction", "forbidden_mass",
                "boundary_band_mass", "dominant_mode_mass"] + [f"mode{i}_mass" for i in range(k)])
    for r in runs:
        masses = r.target.mode_masses(r.samples)
        w.writerow([r.label, r.mode, f"{r.eta:g}", len(r.samples), f"{r.violation_fraction:.6f}",
                    f"{r.target.forbidden_mass():.6f}", f"{r.boundary_band_mass():.6f}",
                    f"{masses.max():.6f}"] + [f"{m:.6f}" for m in masses])
    return buf.getvalue()


def demo_histogram_csv(runs, edges) -> str:
    """Long-format histogram counts; outliers are clipped into the end bins."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "bin_left", "bin_right", "count"])
    for r in runs:
        counts, _ = np.histogram(np.clip(r.samples, edges[0], edges[-1]), bins=edges)
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([r.label, f"{lo:.4f}", f"{hi:.4f}", int(c)])
    return buf.getvalue()


def emit_demo_report(runs, out_dir, bins: int = 80) -> dict:
    """Write ``summary.csv``, ``histograms.csv`` and ``histograms.svg`` into ``out_dir``."""
    if not runs:
        raise ValueError("need at least one run")
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    target = runs[0].target
    edges = histogram_edges(target, bins)
    paths = {"summary": out / "summary.csv", "histograms": out / "histograms.csv", "svg": out / "histograms.svg"}
    paths["summary"].write_text(demo_summary_csv(runs))
    paths["histograms"].write_text(demo_histogram_csv(runs, edges))

    grid = np.linspace(edges[0], edges[-1], 400)
    dens = np.exp(log_density(target, grid))
    fig, axes = plt.subplots(len(runs), 1, figsize=(6, 1.6 * len(runs)), sharex=True)
    axes = np.atleast_1d(axes)
    for ax, r in zip(axes, runs):
        ax.hist(np.clip(r.samples, edges[0], edges[-1]), bins=edges, density=True, color="tab:blue", alpha=0.7)
        ax.plot(grid, dens, color="black", lw=0.8)
        if target.b > target.a:
            ax.axvspan(target.a, target.b, color="tab:red", alpha=0.2)
        ax.set_ylabel(r.label, rotation=0, ha="right", fontsize=8)
        ax.set_yticks([])
    axes[-1].set_xlabel("x")
    fig.tight_layout()
    fig.savefig(paths["svg"], format="svg", metadata={"Date": None})
    plt.close(fig)
    return paths
