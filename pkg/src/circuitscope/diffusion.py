"""DDPM forward/reverse processes, training loop and prediction accuracy."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .unet import HookRegistry, UNet, UNetConfig

logger = logging.getLogger(__name__)

BETA_MAX = 0.999


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep tables; index ``t`` runs 0 (clean) .. T-1 (pure noise)."""

    alpha_bar: np.ndarray
    beta: np.ndarray

    @property
    def T(self) -> int:
        return len(self.alpha_bar)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t >= self.T):
            raise IndexError(f"timestep out of range [0, {self.T}): {t.min()}..{t.max()}")
        return t


def cosine_schedule(T: int = 1000, s: float = 0.008) -> NoiseSchedule:
    """Cosine schedule: alpha_bar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) pi/2).

    beta_t = 1 - alpha_bar_t/alpha_bar_{t-1}, clipped to 0.999. Since alpha_bar_0 = 1
    the first step adds no noise; beta_0 repeats beta_1 so the table stays in (0, 0.999].
    """
    if T < 2:
        raise ValueError(f"cosine schedule needs T >= 2, got {T}")
    t = np.arange(T, dtype=np.float64)
    f = np.cos(((t / T + s) / (1.0 + s)) * math.pi / 2.0) ** 2
    alpha_bar = f / f[0]
    beta = np.empty(T)
    beta[1:] = 1.0 - alpha_bar[1:] / alpha_bar[:-1]
    beta[0] = beta[1]
    beta = np.clip(beta, None, BETA_MAX)
    return NoiseSchedule(alpha_bar, beta)


def scale_timesteps(timesteps, T: int) -> list[int]:
    """Map analysis timesteps given on a 1000-step axis onto a schedule of length T."""
    return [min(T - 1, int(round(t * T / 1000))) for t in timesteps]


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps, with t scalar or per-example."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} differs from x0 shape {x0.shape}")
    t = sched.check_t(t)
    ab = sched.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(np.result_type(x0.dtype, np.float32), copy=False)


class Adam:
    def __init__(self, params: dict, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        c1 = 1.0 - self.b1**self.step_count
        c2 = 1.0 - self.b2**self.step_count
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(np.float32)


def train(
    images: np.ndarray,
    cfg: UNetConfig,
    sched: NoiseSchedule,
    steps: int,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 8,
    model: UNet | None = None,
    log_every: int = 0,
) -> tuple[UNet, list[float]]:
    """Fit a noise predictor on ``images`` [N, C, H, W]; returns the model and per-step losses."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(seed)
    model = model or UNet(cfg, seed=int(rng.integers(2**63)))
    opt = Adam(model.params, lr=lr)
    losses: list[float] = []
    start = time.perf_counter()
    for step in range(steps):
        idx = rng.integers(0, len(images), size=batch_size)
        t = rng.integers(0, sched.T, size=batch_size)
        eps = rng.standard_normal(images[idx].shape).astype(np.float32)
        x_t = q_sample(images[idx], t, eps, sched)
        opt.zero_grad()
        loss = T.mse(model.forward(x_t, t), eps)
        value = loss.data.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss became {value} at step {step} (lr={lr}, seed={seed})")
        T.backward(loss)
        opt.step()
        losses.append(value)
        if log_every and (step + 1) % log_every == 0:
            recent = np.mean(losses[-log_every:])
            logger.info("step %d/%d loss %.4f (%.1fs)", step + 1, steps, recent, time.perf_counter() - start)
    return model, losses


def p_sample_loop(
    model: UNet,
    sched: NoiseSchedule,
    n: int,
    seed: int = 0,
    hooks: HookRegistry | None = None,
    batch_size: int = 16,
) -> np.ndarray:
    """Ancestral sampling from pure noise down to t = 0; images clamped to [-1, 1].

    Each step predicts x0 from the noise estimate, clips it, and draws from the
    Gaussian posterior q(x_{t-1} | x_t, x0).
    """
    cfg = model.cfg
    shape = (n, cfg.channels, cfg.image_size, cfg.image_size)
    if n == 0:
        return np.zeros(shape, dtype=np.float32)
    rng = np.random.default_rng(seed)
    ab, beta = sched.alpha_bar, sched.beta
    x = rng.standard_normal(shape).astype(np.float32)
    with T.no_grad():
        for t in range(sched.T - 1, 0, -1):
            eps_hat = np.concatenate(
                [
                    _hooked_forward(model, x[i : i + batch_size], t, hooks, i)
                    for i in range(0, n, batch_size)
                ]
            )
            x0_hat = np.clip((x - math.sqrt(1.0 - ab[t]) * eps_hat) / math.sqrt(ab[t]), -1.0, 1.0)
            c_x0 = math.sqrt(ab[t - 1]) * beta[t] / (1.0 - ab[t])
            c_xt = math.sqrt(1.0 - beta[t]) * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            var = beta[t] * (1.0 - ab[t - 1]) / (1.0 - ab[t])
            x = c_x0 * x0_hat + c_xt * x
            if t > 1:
                x = x + math.sqrt(max(var, 0.0)) * rng.standard_normal(shape)
            x = x.astype(np.float32)
    return np.clip(x, -1.0, 1.0)


def _hooked_forward(model: UNet, x, t, hooks, batch_index):
    if hooks is not None:
        hooks.batch_index = batch_index
    return model.forward(x, np.full(len(x), t), hooks=hooks).data


def prediction_accuracy(
    model: UNet | Callable,
    images: np.ndarray,
    t: int,
    n: int,
    sched: NoiseSchedule,
    seed: int = 0,
    batch_size: int = 32,
) -> float:
    """max(0, 1 - MSE(eps_hat, eps) / Var(eps)) over ``n`` seeded (x0, eps) draws at timestep ``t``.

    ``model`` is a :class:`UNet` or any callable ``(x_t, t_array) -> eps_hat``.
    """
    rng = np.random.default_rng(seed)
    sched.check_t(t)
    idx = rng.integers(0, len(images), size=n)
    x0 = np.asarray(images, dtype=np.float32)[idx]
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    x_t = q_sample(x0, t, eps, sched)
    predict = model.predict if isinstance(model, UNet) else model
    sq_err = 0.0
    for i in range(0, n, batch_size):
        tt = np.full(len(x_t[i : i + batch_size]), t)
        pred = np.asarray(predict(x_t[i : i + batch_size], tt), dtype=np.float64)
        sq_err += float(((pred - eps[i : i + batch_size]) ** 2).sum())
    mse = sq_err / eps.size
    var = float(np.var(eps.astype(np.float64)))
    return max(0.0, 1.0 - mse / var)
