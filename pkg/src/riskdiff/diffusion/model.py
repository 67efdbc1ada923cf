"""Noise-prediction denoiser, its training loop, one reverse step, and checkpoints."""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset, Normalizer
from .mlp import MLP, Adam
from .schedule import NoiseSchedule, forward_noise_batch

log = logging.getLogger(__name__)

TIME_EMBED_DIM = 32
HIDDEN = (128, 128, 128)
CKPT_MAGIC = b"RDCKPT"
CKPT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    pass


def time_embedding(t, dim: int = TIME_EMBED_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(1000.0) * np.arange(half) / half)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


@dataclass
class DenoiserParams:
    """Weights of ``eps_theta`` plus the normalization it was trained with."""

    net: MLP
    n_waypoints: int
    context_dim: int
    action_norm: Normalizer
    context_norm: Normalizer
    T: int

    @classmethod
    def init(cls, n_waypoints, context_dim, action_norm, context_norm, T, rng, hidden=HIDDEN):
        d_in = 2 * n_waypoints + TIME_EMBED_DIM + context_dim
        net = MLP([d_in, *hidden, 2 * n_waypoints], rng=rng)
        return cls(net, n_waypoints, context_dim, action_norm, context_norm, T)

    def _inputs(self, u_flat, t, ctx):
        B = len(u_flat)
        t = np.broadcast_to(np.asarray(t), (B,))
        ctx = np.broadcast_to(self.context_norm.normalize(ctx), (B, self.context_dim))
        return np.concatenate([u_flat, time_embedding(t), ctx], axis=1)

    def predict(self, u_t, t, ctx) -> np.ndarray:
        """Predicted noise for normalized iterates ``u_t`` of shape ``(..., N_u, 2)``."""
        u_t = np.asarray(u_t, dtype=float)
        lead = u_t.shape[:-2]
        flat = u_t.reshape(-1, 2 * self.n_waypoints)
        ctx = np.asarray(ctx, dtype=float).reshape(-1, self.context_dim)
        out = self.net(self._inputs(flat, t, ctx))
        return out.reshape(lead + (self.n_waypoints, 2))

    def to_meters(self, u_norm) -> np.ndarray:
        u_norm = np.asarray(u_norm, dtype=float)
        flat = u_norm.reshape(u_norm.shape[:-2] + (2 * self.n_waypoints,))
        return self.action_norm.unnormalize(flat).reshape(u_norm.shape)

    def from_meters(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        flat = u.reshape(u.shape[:-2] + (2 * self.n_waypoints,))
        return self.action_norm.normalize(flat).reshape(u.shape)

    @property
    def meter_scale(self) -> np.ndarray:
        """d(meters)/d(normalized) per waypoint coordinate, shape (N_u, 2)."""
        return self.action_norm.scale.reshape(self.n_waypoints, 2)


@dataclass
class TrainConfig:
    epochs: int = 150
    batch_size: int = 256
    lr: float = 1e-3
    lr_final: float | None = None  # cosine decay from lr to this value over training; None keeps lr fixed
    seed: int = 0
    hidden: tuple = HIDDEN


@dataclass
class TrainResult:
    params: DenoiserParams
    losses: list = field(default_factory=list)  # mean loss per epoch


def _f32(a) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(float)


def _as_float32(params: DenoiserParams) -> None:
    params.net.params = [_f32(p) for p in params.net.params]
    params.action_norm = Normalizer(_f32(params.action_norm.mean), _f32(params.action_norm.scale))
    params.context_norm = Normalizer(_f32(params.context_norm.mean), _f32(params.context_norm.scale))


def train(dataset: Dataset, schedule: NoiseSchedule, config: TrainConfig | None = None) -> TrainResult:
    """Minimize ``E ||eps - eps_theta(u^t, t | ctx)||^2`` with ``t ~ U{1..T}``.

    Weights are rounded to float32 at the end so a saved checkpoint reloads
    to exactly the returned parameters.
    """
    config = config or TrainConfig()
    rng = np.random.default_rng(config.seed)
    ctx_n, act_n = dataset.normalized()
    M = len(dataset)
    n_u = dataset.n_waypoints
    params = DenoiserParams.init(n_u, ctx_n.shape[1], dataset.action_norm, dataset.context_norm,
                                 schedule.T, rng, hidden=config.hidden)
    net = params.net
    opt = Adam(net.params, lr=config.lr)
    emb_table = time_embedding(np.arange(schedule.T + 1))
    total_steps = config.epochs * math.ceil(M / config.batch_size)
    step = 0
    losses = []
    for epoch in range(config.epochs):
        order = rng.permutation(M)
        total, count = 0.0, 0
        for start in range(0, M, config.batch_size):
            idx = order[start:start + config.batch_size]
            B = len(idx)
            u0 = act_n[idx]
            t = rng.integers(1, schedule.T + 1, size=B)
            eps = rng.standard_normal(u0.shape)
            ut = forward_noise_batch(u0, t, eps, schedule)
            x = np.concatenate([ut, emb_table[t], ctx_n[idx]], axis=1)
            pred, cache = net.forward(x, keep=True)
            diff = pred - eps
            loss = float(np.mean(diff * diff))
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
            grads = net.backward(cache, 2.0 * diff / diff.size)
            if config.lr_final is not None:
                frac = step / max(total_steps - 1, 1)
                opt.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1.0 + math.cos(math.pi * frac))
            opt.step(net.params, grads)
            step += 1
            total += loss * B
            count += B
        losses.append(total / count)
        if epoch % 25 == 0 or epoch == config.epochs - 1:
            log.info("epoch %d loss %.5f", epoch, losses[-1])
    _as_float32(params)
    return TrainResult(params, losses)


def epsilon_mse(params: DenoiserParams, dataset: Dataset, schedule: NoiseSchedule, t: int,
                rng, repeats: int = 4) -> float:
    """Noise-prediction MSE at a fixed step ``t`` over the dataset."""
    ctx = dataset.contexts
    u0 = params.from_meters(dataset.actions)
    errs = []
    for _ in range(repeats):
        eps = rng.standard_normal(u0.shape)
        ut = forward_noise_batch(u0, np.full(len(u0), t), eps, schedule)
        errs.append(np.mean((params.predict(ut, t, ctx) - eps) ** 2))
    return float(np.mean(errs))


def posterior_mean(u_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    a = schedule.alpha_step[t]
    ab = schedule.alpha_bar[t]
    return (u_t - (1.0 - a) / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)


def ddpm_step(u_t, t: int, params: DenoiserParams, ctx, schedule: NoiseSchedule, rng, eps_hat=None):
    """One reverse step ``u^t -> u^{t-1}`` in normalized action space.

    ``eps_hat`` overrides the network prediction (used by guidance).
    """
    t = schedule.check_t(t, lo=1)
    u_t = np.asarray(u_t, dtype=float)
    if eps_hat is None:
        eps_hat = params.predict(u_t, t, ctx)
    w = rng.standard_normal(u_t.shape)
    return posterior_mean(u_t, t, eps_hat, schedule) + schedule.sigma[t] * w


# --- checkpoints --------------------------------------------------------------


def save_checkpoint(params: DenoiserParams, path) -> None:
    """Binary layout (little endian)::

        magic 'RDCKPT' | u32 version | u32 n_waypoints | u32 context_dim | u32 T
        u32 n_dims | u32 dims[n_dims]
        per layer: f32 W[in*out] (row-major) | f32 b[out]
        f32 action_mean[2N] | f32 action_scale[2N] | f32 ctx_mean[C] | f32 ctx_scale[C]
    """
    dims = params.net.dims
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<5I", CKPT_VERSION, params.n_waypoints, params.context_dim, params.T, len(dims)))
        fh.write(struct.pack(f"<{len(dims)}I", *dims))
        for p in params.net.params:
            fh.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
        for arr in (params.action_norm.mean, params.action_norm.scale,
                    params.context_norm.mean, params.context_norm.scale):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path) -> DenoiserParams:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a riskdiff checkpoint")
    off = len(CKPT_MAGIC)
    try:
        version, n_u, ctx_dim, T, n_dims = struct.unpack_from("<5I", data, off)
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint header") from exc
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off += 20
    try:
        dims = list(struct.unpack_from(f"<{n_dims}I", data, off))
        off += 4 * n_dims

        def take(n, shape=None):
            nonlocal off
            arr = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(float)
            off += 4 * n
            return arr.reshape(shape) if shape else arr

        weights = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(take(fan_in * fan_out, (fan_in, fan_out)))
            weights.append(take(fan_out))
        a_mean, a_scale = take(2 * n_u), take(2 * n_u)
        c_mean, c_scale = take(ctx_dim), take(ctx_dim)
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes in checkpoint")
    if dims[0] != 2 * n_u + TIME_EMBED_DIM + ctx_dim or dims[-1] != 2 * n_u:
        raise ValueError(f"{path}: layer dims {dims} inconsistent with N_u={n_u}, context={ctx_dim}")
    net = MLP(dims, params=weights)
    return DenoiserParams(net, n_u, ctx_dim, Normalizer(a_mean, a_scale), Normalizer(c_mean, c_scale), T)
