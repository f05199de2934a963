"""Denoising-diffusion machinery over spectrogram-shaped arrays.

Forward corruption (both the closed form and the per-step Markov
kernel), the epsilon-parameterized reverse step, an ancestral sampler
with optional evenly-strided step reduction, and the transition-weighted
noise-prediction loss.

Steps are 1-indexed: t runs over 1..T and betas[t-1] is the variance
added at step t.  All randomness comes from explicitly seeded
generators; nothing touches global random state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .dsp import MelSpectrogram
from .transition import WeightMap


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step noise variances and their running products."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    T: int
    beta_min: float
    beta_max: float
    kind: str = "linear"

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        alphas = np.asarray(self.alphas, dtype=np.float64)
        alpha_bars = np.asarray(self.alpha_bars, dtype=np.float64)
        for name, arr in (("betas", betas), ("alphas", alphas), ("alpha_bars", alpha_bars)):
            if arr.shape != (self.T,):
                raise ValueError(f"{name} must have length T")
            object.__setattr__(self, name, arr)
        if betas.min() <= 0.0 or betas.max() >= 1.0:
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(alpha_bars) >= 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if alpha_bars[-1] <= 0.0:
            raise ValueError("alpha_bars must stay positive")

    def to_json(self) -> dict:
        return {"T": self.T, "beta_min": self.beta_min, "beta_max": self.beta_max, "kind": self.kind}

    @staticmethod
    def from_json(obj: dict) -> "NoiseSchedule":
        if obj.get("kind", "linear") != "linear":
            raise ValueError(f"unknown schedule kind: {obj.get('kind')}")
        return make_schedule(int(obj["T"]), float(obj["beta_min"]), float(obj["beta_max"]))


@dataclass(frozen=True)
class DiffusionState:
    """A spectrogram-shaped array at a given diffusion step."""

    x: np.ndarray
    t: int

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        object.__setattr__(self, "x", x)
        if not np.all(np.isfinite(x)):
            raise ValueError("state entries must be finite")
        if self.t < 0:
            raise ValueError("step must be >= 0")


@dataclass(frozen=True)
class ConditionBundle:
    """Per-frame conditioning for the denoiser.

    ``cond`` is a D x T matrix (the stand-in for a score embedding) and
    ``ref_mel`` the prepared reference spectrogram, same shape as the
    generation target.
    """

    cond: np.ndarray
    ref_mel: MelSpectrogram

    def __post_init__(self):
        cond = np.asarray(self.cond, dtype=np.float64)
        object.__setattr__(self, "cond", cond)
        if cond.ndim != 2:
            raise ValueError("cond must be a D x T matrix")
        if cond.shape[1] != self.ref_mel.n_frames:
            raise ValueError("cond frame count must match the reference spectrogram")


def make_schedule(T: int, beta_min: float = 1e-4, beta_max: float = 0.06) -> NoiseSchedule:
    """Linear beta schedule with cumulative alpha products."""
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ValueError("require 0 < beta_min <= beta_max < 1")
    if T == 1:
        betas = np.array([beta_min])
    else:
        steps = np.arange(T, dtype=np.float64)
        betas = beta_min + steps / (T - 1) * (beta_max - beta_min)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        T=T,
        beta_min=beta_min,
        beta_max=beta_max,
    )


def _check_step(t: int, schedule: NoiseSchedule) -> None:
    if not (1 <= t <= schedule.T):
        raise ValueError(f"step {t} outside 1..{schedule.T}")


def _check_shapes(*arrays: np.ndarray) -> None:
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays[1:]):
        raise ValueError("array shapes must match")


def q_sample(x0: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward corruption: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_shapes(x0, noise)
    _check_step(t, schedule)
    abar = schedule.alpha_bars[t - 1]
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise


def q_step(x_prev: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """One Markov forward step: sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise."""
    x_prev = np.asarray(x_prev, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    _check_shapes(x_prev, noise)
    _check_step(t, schedule)
    beta = schedule.betas[t - 1]
    return np.sqrt(1.0 - beta) * x_prev + np.sqrt(beta) * noise


def invert_q_sample(x_t: np.ndarray, t: int, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Exact inversion of q_sample given the noise that was used."""
    _check_step(t, schedule)
    abar = schedule.alpha_bars[t - 1]
    return (np.asarray(x_t) - np.sqrt(1.0 - abar) * np.asarray(noise)) / np.sqrt(abar)


def reverse_mean(
    x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule
) -> np.ndarray:
    """Posterior mean of the reverse kernel under epsilon prediction:

        mu = (x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_shapes(x_t, eps_hat)
    _check_step(t, schedule)
    beta = schedule.betas[t - 1]
    alpha = schedule.alphas[t - 1]
    abar = schedule.alpha_bars[t - 1]
    return (x_t - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)


def p_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    z: np.ndarray | None,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """One ancestral reverse step with variance beta_t; no noise at t=1."""
    mean = reverse_mean(x_t, t, eps_hat, schedule)
    if t == 1 or z is None:
        return mean
    z = np.asarray(z, dtype=np.float64)
    _check_shapes(mean, z)
    return mean + np.sqrt(schedule.betas[t - 1]) * z


def sampling_steps(schedule: NoiseSchedule, steps: int) -> np.ndarray:
    """Evenly strided descending subset of 1..T, always including T and 1."""
    if not (1 <= steps <= schedule.T):
        raise ValueError(f"steps must lie in 1..{schedule.T}")
    if steps == 1:
        return np.array([1], dtype=int)
    return np.round(np.linspace(schedule.T, 1, steps)).astype(int)


def sample(
    denoiser: Callable[[np.ndarray, int, ConditionBundle], np.ndarray],
    bundle: ConditionBundle,
    schedule: NoiseSchedule,
    steps: int,
    seed: int,
) -> np.ndarray:
    """Ancestral sampling from standard normal noise down to an x0 estimate.

    ``denoiser(x_t, t, bundle)`` must return the noise estimate for x_t.
    The chain visits an evenly strided subset of the schedule (all of
    T..1 when steps == T), reusing each visited step's beta.  Output is
    a deterministic function of (seed, inputs): the generator draws the
    initial state first, then one z per visited step except the last.
    """
    ts = sampling_steps(schedule, steps)
    rng = np.random.default_rng(seed)
    shape = bundle.ref_mel.data.shape
    x = rng.standard_normal(shape)
    for i, t in enumerate(ts):
        eps_hat = denoiser(x, int(t), bundle)
        z = rng.standard_normal(shape) if i < len(ts) - 1 else None
        x = p_step(x, int(t), eps_hat, z, schedule)
    return x


def weighted_eps_loss(
    eps_true: np.ndarray, eps_hat: np.ndarray, weights: WeightMap
) -> tuple[float, np.ndarray]:
    """Weighted mean squared error between true and predicted noise.

    loss = sum(w * (eps - eps_hat)^2) / sum(w); the returned gradient is
    d loss / d eps_hat = -2 w (eps - eps_hat) / sum(w).
    """
    eps_true = np.asarray(eps_true, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    w = weights.data
    _check_shapes(eps_true, eps_hat, w)
    if w.min() <= 0.0:
        raise ValueError("weights must be positive")
    total = w.sum()
    diff = eps_true - eps_hat
    loss = float((w * diff * diff).sum() / total)
    grad = -2.0 * w * diff / total
    return loss, grad
