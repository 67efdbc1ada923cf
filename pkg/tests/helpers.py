"""Small constructors shared by the test modules."""

from pathlib import Path

import numpy as np

from riskdiff.diffusion.data import Dataset
from riskdiff.diffusion.model import TrainConfig, train
from riskdiff.diffusion.schedule import NoiseSchedule
from riskdiff.risk import Pose, RiskConfig, RiskMap, RiskSurrogate, c_risk
from riskdiff.terrain import GridSpec


def risk_map(rho, resolution=0.1, gamma=0.8, origin=(0.0, 0.0)) -> RiskMap:
    """A RiskMap straight from a ``(H, W)`` array of risk values."""
    rho = np.asarray(rho, dtype=float)
    spec = GridSpec(rho.shape[1], rho.shape[0], resolution, origin)
    return RiskMap(spec, rho, RiskConfig(gamma=gamma))


def box_map(size=40, resolution=0.1, box=None, value=2.0, gamma=0.8) -> RiskMap:
    """Zero-risk square map, optionally with an unsafe block ``box = (ix0, ix1, iy0, iy1)``."""
    rho = np.zeros((size, size))
    if box is not None:
        ix0, ix1, iy0, iy1 = box
        rho[iy0:iy1, ix0:ix1] = value
    return risk_map(rho, resolution, gamma)


# A fixed 8-waypoint trajectory (meters) used for the overfit checks.
FIXED_TRAJECTORY = np.column_stack([0.2 * np.arange(1, 9), 0.05 * np.arange(1, 9) ** 1.2])


def overfit_policy(epochs=1200, copies=512, T=50, seed=0):
    """Model trained on one constant trajectory with a constant context.

    Every coordinate has zero variance, so the normalizer keeps unit scale
    and normalized units are meters offset by the trajectory itself.
    """
    ds = Dataset.from_pairs(np.zeros((copies, 3)), np.repeat(FIXED_TRAJECTORY[None], copies, axis=0))
    schedule = NoiseSchedule.linear(T)
    cfg = TrainConfig(epochs=epochs, batch_size=128, lr=1e-3, lr_final=1e-5, seed=seed)
    return train(ds, schedule, cfg), ds, schedule


def random_policy(n_u=8, ctx_dim=3, T=10, seed=0, hidden=(32, 32), scale=1.0):
    """Untrained denoiser with an identity-like normalizer (``scale`` meters per unit)."""
    from riskdiff.diffusion.data import Normalizer
    from riskdiff.diffusion.model import DenoiserParams

    rng = np.random.default_rng(seed)
    norm = Normalizer(np.zeros(2 * n_u), np.full(2 * n_u, float(scale)))
    return DenoiserParams.init(n_u, ctx_dim, norm, Normalizer.identity(ctx_dim), T, rng, hidden=hidden)


def run_pipeline(cli_main, root, seed=0, episodes=3):
    """gen-data -> train -> eval at toy scale; returns the eval output directory."""
    root = Path(root)
    steps = [
        ["gen-data", "--n-recipes", "3", "--episodes", "20", "--mc-samples", "8", "--out", str(root / "data")],
        ["train", "--data", str(root / "data"), "--epochs", "5", "--T", "10", "--out", str(root / "ckpt.npz")],
        ["eval", "--ckpt", str(root / "ckpt.npz"), "--episodes", str(episodes), "--mc-samples", "8",
         "--out", str(root / "eval")],
    ]
    for argv in steps:
        rc = cli_main(argv + ["--seed", str(seed), "--workers", "1"])
        if rc != 0:
            raise RuntimeError(f"{argv[0]} exited with {rc}")
    return root / "eval"


def ru_cvar(x, alpha):
    """Rockafellar-Uryasev minimum over a z-grid of every sample value plus a dense sweep."""
    x = np.asarray(x, dtype=float)
    if alpha == 1:
        return float(x.max())
    z = np.union1d(x, np.linspace(x.min(), x.max(), 201))
    obj = z + np.maximum(x[None, :] - z[:, None], 0.0).mean(axis=1) / (1.0 - alpha)
    return float(obj.min())


def surrogate_points(u, pose, m, res):
    s = np.arange(1, m + 1) / m
    prev = np.vstack([np.zeros((1, 2)), u[:-1]])
    q = (1 - s)[None, :, None] * prev[:, None, :] + s[None, :, None] * u[:, None, :]
    q = np.vstack([np.zeros((1, 2)), q.reshape(-1, 2)])
    return pose.position + q @ pose.rotation().T


def far_from_kinks(u, pose, sur, tol=1e-3):
    res = sur.risk_map.spec.resolution
    g = surrogate_points(u, pose, sur.segment_samples, res) / res - 0.5
    d = np.abs(g - np.round(g))
    return bool(np.all(d > tol))


def fd_relative_error(sur, u, pose, h):
    _, grad = c_risk(sur, u, pose)
    fd = np.zeros_like(u)
    for i in range(u.shape[0]):
        for j in range(2):
            e = np.zeros_like(u)
            e[i, j] = h
            fd[i, j] = (c_risk(sur, u + e, pose)[0] - c_risk(sur, u - e, pose)[0]) / (2 * h)
    return np.abs(grad - fd).max() / max(np.abs(fd).max(), 1e-12)


def random_gradient_cases(n, seed=0):
    """Random smooth-ish maps and sequences whose sample points avoid interpolation kinks."""
    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        rho = rng.uniform(0.0, 1.6, (20, 20))
        sur = RiskSurrogate(risk_map(rho, resolution=0.1, gamma=0.8), margin=0.1)
        pose = Pose(rng.uniform(0.7, 1.3), rng.uniform(0.7, 1.3), rng.uniform(-np.pi, np.pi))
        u = np.cumsum(rng.uniform(-0.15, 0.15, (8, 2)), axis=0)
        if far_from_kinks(u, pose, sur):
            out.append((sur, u, pose))
    return out
