"""Noise schedules, the forward corruption process, reverse-step moments,
the noise-prediction training loss, and the guided/unguided samplers.

Timesteps are 1-based (t = 1..T); schedule arrays store index t-1. The
reverse process uses a fixed diagonal variance equal to the forward
posterior variance, which is zero at t=1, so the final denoise step is
deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .base import check_array

__all__ = [
    "NoiseSchedule", "make_schedule", "forward_diffuse", "reverse_moments",
    "ddpm_loss", "sample_unguided", "sample_guided", "denoise_batch",
]


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep noise rates and their cumulative products.

    beta[t-1] is the noise rate at step t; alpha = 1 - beta; alpha_bar is
    the running product of alpha; posterior_var is the reverse-process
    variance ((1 - alpha_bar[t-1]) / (1 - alpha_bar[t])) * beta[t] with
    alpha_bar[0] defined as 1.
    """

    timesteps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    posterior_var: np.ndarray

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 1 <= t <= self.timesteps:
            raise ValueError(f"timestep {t} outside 1..{self.timesteps}")
        return t


def make_schedule(timesteps: int = 100, beta_start: float = 1e-3,
                  beta_end: float = 0.2) -> NoiseSchedule:
    """Linear beta schedule with derived cumulative quantities."""
    if timesteps < 1:
        raise ValueError("timesteps must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, timesteps)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_var = (1.0 - prev) / (1.0 - alpha_bar) * beta
    return NoiseSchedule(timesteps, beta, alpha, alpha_bar, posterior_var)


def forward_diffuse(tau0: np.ndarray, t: int, eps: np.ndarray,
                    sched: NoiseSchedule) -> np.ndarray:
    """Corrupt tau0 to its step-t marginal with the given noise draw."""
    t = sched.check_t(t)
    tau0 = np.asarray(tau0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != tau0.shape:
        raise ValueError(f"noise shape {eps.shape} != data shape {tau0.shape}")
    ab = sched.alpha_bar[t - 1]
    return np.sqrt(ab) * tau0 + np.sqrt(1.0 - ab) * eps


def reverse_moments(tau_t: np.ndarray, t: int, eps_hat: np.ndarray,
                    sched: NoiseSchedule) -> tuple[np.ndarray, float]:
    """Mean and (scalar) diagonal variance of the reverse step at t."""
    t = sched.check_t(t)
    tau_t = np.asarray(tau_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps_hat.shape != tau_t.shape:
        raise ValueError(f"model output shape {eps_hat.shape} != state {tau_t.shape}")
    ab = sched.alpha_bar[t - 1]
    mu = (tau_t - sched.beta[t - 1] / np.sqrt(1.0 - ab) * eps_hat) \
        / np.sqrt(sched.alpha[t - 1])
    return mu, float(sched.posterior_var[t - 1])


def ddpm_loss(windows: np.ndarray, scene, model, sched: NoiseSchedule,
              rng: np.random.Generator, prefix_prob: float = 0.0,
              prefix_max: int | None = None) -> nk.Tensor:
    """Noise-prediction loss on a batch of clean windows from one scene.

    Draws a timestep and a unit-normal noise per item, corrupts, and
    returns the mean squared error between the drawn noise and the model
    prediction. ``model(tau_t, t, scene)`` may return a Tensor (training)
    or a plain array (oracle hooks); either way the loss value is exact.

    With ``prefix_prob`` > 0, that fraction of items keeps a random-length
    clean prefix in place of its corrupted frames and drops those frames
    from the loss. This matches what a receding-horizon planner feeds the
    model at test time, where executed history overwrites the first
    frames after every denoise step; without it the model treats the
    clamped prefix as noise and plans do not continue from it.
    """
    windows = check_array(windows, "windows", ndim=3)
    if windows.shape[0] == 0:
        raise ValueError("empty batch")
    b, horizon, _ = windows.shape
    t = rng.integers(1, sched.timesteps + 1, size=b)
    eps = rng.standard_normal(windows.shape)
    ab = sched.alpha_bar[t - 1][:, None, None]
    tau_t = np.sqrt(ab) * windows + np.sqrt(1.0 - ab) * eps
    mask = np.ones((b, horizon, 1))
    if prefix_prob > 0.0 and horizon > 1:
        longest = min(prefix_max or horizon - 1, horizon - 1)
        lengths = rng.integers(1, longest + 1, size=b)
        keep = rng.uniform(size=b) < prefix_prob
        for i in range(b):
            if keep[i]:
                k = lengths[i]
                tau_t[i, :k] = windows[i, :k]
                mask[i, :k] = 0.0
    eps_hat = model(tau_t, t, scene)
    diff = nk.add(eps_hat, nk.scale(nk.Tensor(eps), -1.0))
    masked = nk.mul(nk.mul(diff, diff), nk.Tensor(mask))
    denom = float(mask.sum()) * windows.shape[2]
    return nk.scale(nk.reduce_sum(masked), 1.0 / denom)


def denoise_batch(model, scene, sched: NoiseSchedule, rng: np.random.Generator,
                  n: int, horizon: int, dim: int, guide_fn=None,
                  frame_override=None) -> np.ndarray:
    """Run the full reverse process for ``n`` samples at once.

    ``guide_fn(mu, t, var) -> shift`` tilts the reverse mean before noise
    is added; ``frame_override(tau, t)`` rewrites frames after each step
    (the inpainting planner clamps its executed prefix there). The random
    stream is consumed identically whether or not guidance is active, so
    zero guidance is bit-identical to no guidance under the same
    generator state.
    """
    tau = rng.standard_normal((n, horizon, dim))
    for t in range(sched.timesteps, 0, -1):
        t_vec = np.full(n, t, dtype=np.int64)
        eps_hat = model(tau, t_vec, scene)
        eps_hat = eps_hat.data if isinstance(eps_hat, nk.Tensor) else np.asarray(eps_hat)
        mu, var = reverse_moments(tau, t, eps_hat, sched)
        if guide_fn is not None:
            mu = mu + guide_fn(mu, t, var)
        if t > 1:
            tau = mu + np.sqrt(var) * rng.standard_normal(mu.shape)
        else:
            tau = mu
        if not np.all(np.isfinite(tau)):
            raise FloatingPointError(f"non-finite state during denoising at t={t}")
        if frame_override is not None:
            tau = frame_override(tau, t)
    return tau


def sample_unguided(model, scene, sched: NoiseSchedule, rng: np.random.Generator,
                    horizon: int, dim: int) -> np.ndarray:
    """Draw one trajectory from the learned reverse process."""
    return denoise_batch(model, scene, sched, rng, 1, horizon, dim)[0]


def sample_guided(model, scene, guidance, sched: NoiseSchedule,
                  rng: np.random.Generator, horizon: int, dim: int) -> np.ndarray:
    """Draw one trajectory with objective-gradient guidance.

    ``guidance`` is a GuidanceEvaluator (see objectives); a zero scale
    reproduces the unguided sampler bit-exactly under the same rng.
    """
    guide_fn = None if guidance is None else guidance.shift_fn()
    return denoise_batch(model, scene, sched, rng, 1, horizon, dim,
                         guide_fn=guide_fn)[0]
