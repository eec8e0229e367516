"""Noise schedule for the diffusion sampler.

Arrays are 0-based while timesteps are 1-based, i.e. ``betas[t - 1]`` belongs
to timestep ``t``; ``alpha_bar(0)`` is 1 by convention so the final sampling
step lands on a clean latent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class NoiseSchedule:
    """Beta/alpha sequences plus the descending timestep subsequence the sampler visits."""

    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    timestep_indices: np.ndarray

    @property
    def num_timesteps(self) -> int:
        return int(self.betas.shape[0])

    @property
    def num_steps(self) -> int:
        return int(self.timestep_indices.shape[0])

    def beta(self, t: int) -> float:
        self._check_timestep(t)
        return float(self.betas[t - 1])

    def alpha(self, t: int) -> float:
        self._check_timestep(t)
        return float(self.alphas[t - 1])

    def alpha_bar(self, t: int) -> float:
        if t == 0:
            return 1.0
        self._check_timestep(t)
        return float(self.alpha_bars[t - 1])

    def _check_timestep(self, t: int) -> None:
        if not 1 <= t <= self.num_timesteps:
            raise ConfigError(f"timestep {t} outside [1, {self.num_timesteps}]")


def build_schedule(
    timesteps: int,
    beta_start: float,
    beta_end: float,
    num_steps: int,
) -> NoiseSchedule:
    """Linear beta schedule with an evenly spaced descending sampler subsequence.

    The subsequence starts at ``timesteps`` and ends at 1, so the last sampler
    step uses ``alpha_bar(0) = 1`` and produces the clean latent.
    """
    if timesteps < 1:
        raise ConfigError(f"timesteps must be >= 1, got {timesteps}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"beta range must satisfy 0 < beta_start <= beta_end < 1, "
            f"got [{beta_start}, {beta_end}]"
        )
    if not 1 <= num_steps <= timesteps:
        raise ConfigError(
            f"num_steps must lie in [1, timesteps={timesteps}], got {num_steps}"
        )

    betas = np.linspace(beta_start, beta_end, timesteps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)

    if num_steps == 1:
        indices = np.array([timesteps], dtype=np.int64)
    else:
        indices = np.rint(np.linspace(timesteps, 1, num_steps)).astype(np.int64)
    if np.any(np.diff(indices) >= 0):
        raise ConfigError(
            f"cannot place {num_steps} strictly decreasing steps in [1, {timesteps}]"
        )

    return NoiseSchedule(
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        timestep_indices=indices,
    )
