"""Noise schedule, forward diffusion, the noise-prediction loss, and
ancestral reverse sampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    DivergedSampling,
    FinalStepNoise,
    InvalidSchedule,
    InvalidTimestep,
    ShapeMismatch,
)


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear beta schedule with derived alpha and cumulative-product arrays.

    Arrays are 1-indexed conceptually: entry [t-1] belongs to timestep t."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return len(self.beta)


def make_schedule(steps: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if steps < 1:
        raise InvalidSchedule(f"need at least 1 step, got {steps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise InvalidSchedule(f"bad beta bounds ({beta_start}, {beta_end})")
    if steps == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
    alpha = 1.0 - beta
    return NoiseSchedule(beta, alpha, np.cumprod(alpha))


def _check_t(t: int, schedule: NoiseSchedule) -> None:
    if not 1 <= t <= schedule.steps:
        raise InvalidTimestep(f"t={t} outside [1, {schedule.steps}]")


def q_sample(x0, t: int, epsilon, schedule: NoiseSchedule):
    """Forward-process marginal: x_t = sqrt(abar_t) x_0 + sqrt(1-abar_t) eps."""
    _check_t(t, schedule)
    abar = schedule.alpha_bar[t - 1]
    return float(np.sqrt(abar)) * x0 + float(np.sqrt(1.0 - abar)) * epsilon


def q_sample_batch(x0: torch.Tensor, t: torch.Tensor, epsilon: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """Vectorized forward marginal for a per-element timestep vector."""
    if not ((t >= 1) & (t <= schedule.steps)).all():
        raise InvalidTimestep(f"timesteps outside [1, {schedule.steps}]")
    abar = torch.from_numpy(schedule.alpha_bar).to(x0.dtype)[t - 1]
    abar = abar.reshape(-1, *([1] * (x0.ndim - 1)))
    return abar.sqrt() * x0 + (1.0 - abar).sqrt() * epsilon


def training_loss(epsilon, epsilon_pred):
    """Mean squared error between injected and predicted noise."""
    if tuple(epsilon.shape) != tuple(epsilon_pred.shape):
        raise ShapeMismatch(f"{tuple(epsilon.shape)} vs {tuple(epsilon_pred.shape)}")
    diff = epsilon - epsilon_pred
    return (diff * diff).mean()


def posterior_mean(x_t, t: int, epsilon_pred, schedule: NoiseSchedule):
    """mu = (x_t - (1-alpha_t)/sqrt(1-abar_t) * eps_pred) / sqrt(alpha_t)."""
    _check_t(t, schedule)
    alpha = schedule.alpha[t - 1]
    abar = schedule.alpha_bar[t - 1]
    coeff = float((1.0 - alpha) / np.sqrt(1.0 - abar))
    return (x_t - coeff * epsilon_pred) / float(np.sqrt(alpha))


def p_sample_step(x_t, t: int, epsilon_pred, z, schedule: NoiseSchedule):
    """One ancestral step x_t -> x_{t-1}, with fixed variance beta_t.

    z must be zero at the final step t=1."""
    _check_t(t, schedule)
    if z is None:
        z_is_zero = True
    elif torch.is_tensor(z):
        z_is_zero = bool((z == 0).all())
    else:
        z_is_zero = bool((np.asarray(z) == 0).all())
    if t == 1 and not z_is_zero:
        raise FinalStepNoise("the t=1 step must be noise-free")
    mean = posterior_mean(x_t, t, epsilon_pred, schedule)
    if z_is_zero:
        return mean
    return mean + float(np.sqrt(schedule.beta[t - 1])) * z


def sample(
    denoiser,
    text,
    schedule: NoiseSchedule,
    shape,
    seed: int,
    clamp: bool = True,
    clip_denoised: bool = True,
    eta: float = 0.5,
):
    """Ancestral sampling from pure noise, conditioned on the text vectors.

    denoiser(x_t, t, text) -> predicted noise; shape is (batch, K, S, S).
    Fully reproducible from the seed.

    With clip_denoised the implied clean estimate x0_hat is clamped to the
    heatmap range [0, 1] before each posterior step, which keeps imperfect
    denoisers from drifting off the data manifold; for an in-range x0_hat the
    step is algebraically identical to p_sample_step.

    eta scales the per-step noise (std eta * sqrt(beta_t)): 1 is the full
    fixed-variance ancestral chain, 0 the mean-only chain. Sample diversity
    comes mostly from the initial draw; the intermediate noise acts as a
    temperature, and the reduced default keeps small denoisers on-manifold."""
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(shape, generator=gen)
    with torch.no_grad():
        for t in range(schedule.steps, 0, -1):
            eps_pred = denoiser(x, t, text)
            z = eta * torch.randn(shape, generator=gen) if t > 1 else torch.zeros(shape)
            if clip_denoised:
                abar = schedule.alpha_bar[t - 1]
                x0_hat = (x - float(np.sqrt(1.0 - abar)) * eps_pred) / float(np.sqrt(abar))
                x0_hat = x0_hat.clamp(0.0, 1.0)
                if t > 1:
                    abar_prev = schedule.alpha_bar[t - 2]
                    alpha = schedule.alpha[t - 1]
                    beta = schedule.beta[t - 1]
                    mean = (
                        float(np.sqrt(abar_prev) * beta / (1.0 - abar)) * x0_hat
                        + float(np.sqrt(alpha) * (1.0 - abar_prev) / (1.0 - abar)) * x
                    )
                    x = mean + float(np.sqrt(beta)) * z
                else:
                    x = x0_hat
            else:
                x = p_sample_step(x, t, eps_pred, z, schedule)
            if not torch.isfinite(x).all():
                raise DivergedSampling(f"non-finite latent at t={t}")
    if clamp:
        x = x.clamp(0.0, 1.0)
    return x


def write_schedule_csv(schedule: NoiseSchedule, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t", "beta", "alpha", "alpha_bar"])
        for t in range(1, schedule.steps + 1):
            writer.writerow(
                [
                    t,
                    repr(float(schedule.beta[t - 1])),
                    repr(float(schedule.alpha[t - 1])),
                    repr(float(schedule.alpha_bar[t - 1])),
                ]
            )
