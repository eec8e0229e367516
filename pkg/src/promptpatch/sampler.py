"""Reverse-diffusion sampling: DDIM production path plus a DDPM reference step.

With ``sigma = 0`` every step is deterministic and differentiable, so the full
map from the seed latent to the clean latent can be optimized by gradient
descent. Cross-attention maps from the prompt-conditioned branch are captured
at every step into an :class:`AttentionRecord`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Protocol

import torch

from .errors import ConfigError
from .rng import DTYPE, torch_generator
from .schedule import NoiseSchedule


@dataclass(frozen=True)
class LatentState:
    """A latent tensor tagged with its diffusion timestep (0 = clean)."""

    values: torch.Tensor
    timestep: int

    def __post_init__(self) -> None:
        if self.timestep < 0:
            raise ValueError(f"timestep must be >= 0, got {self.timestep}")
        if not bool(torch.isfinite(self.values.detach()).all()):
            raise ValueError("latent contains non-finite entries")


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 7
    guidance_scale: float = 7.5
    sigma_mode: Literal["deterministic", "stochastic"] = "deterministic"
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ConfigError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.guidance_scale < 0:
            raise ConfigError(
                f"guidance_scale must be >= 0, got {self.guidance_scale}"
            )
        if self.sigma_mode not in ("deterministic", "stochastic"):
            raise ConfigError(f"unknown sigma_mode {self.sigma_mode!r}")


class NoisePredictor(Protocol):
    """Differentiable noise estimator exposing its cross-attention maps.

    Calling the predictor on ``(latent_values, timestep, embedding)`` returns
    the noise estimate (same shape as the latent) together with one attention
    map per layer, each row a softmax over text tokens.
    """

    num_attention_layers: int

    def __call__(
        self, values: torch.Tensor, timestep: int, embedding: torch.Tensor
    ) -> tuple[torch.Tensor, list[torch.Tensor]]: ...


@dataclass(frozen=True)
class AttentionRecord:
    """Grid of attention maps indexed by (sampler step, layer)."""

    maps: tuple[tuple[torch.Tensor, ...], ...]

    @property
    def num_steps(self) -> int:
        return len(self.maps)

    @property
    def num_layers(self) -> int:
        return len(self.maps[0]) if self.maps else 0

    @property
    def grid_size(self) -> int:
        return self.num_steps * self.num_layers

    def flat(self) -> list[torch.Tensor]:
        return [m for row in self.maps for m in row]

    def detach(self) -> "AttentionRecord":
        return AttentionRecord(
            tuple(tuple(m.detach().clone() for m in row) for row in self.maps)
        )

    def validate(self, row_sum_tol: float = 1e-5) -> None:
        """Check the grid is complete and every map row is a probability simplex."""
        if not self.maps:
            raise RuntimeError("attention record is empty")
        layers = self.num_layers
        for i, row in enumerate(self.maps):
            if len(row) != layers:
                raise RuntimeError(
                    f"incomplete attention capture at step {i}: "
                    f"{len(row)} of {layers} layers"
                )
            for j, attn in enumerate(row):
                detached = attn.detach()
                if bool((detached < 0).any()):
                    raise RuntimeError(f"negative attention entry at ({i}, {j})")
                sums = detached.sum(dim=-1)
                if bool((sums - 1.0).abs().max() > row_sum_tol):
                    raise RuntimeError(f"attention rows at ({i}, {j}) do not sum to 1")


@dataclass(frozen=True)
class DiffusionTrace:
    """Result of one sampling run: clean latent, attention grid, optional intermediates."""

    z0: LatentState
    attention: AttentionRecord
    intermediates: tuple[LatentState, ...] | None = None

    def __post_init__(self) -> None:
        if self.z0.timestep != 0:
            raise ValueError("trace must end at timestep 0")


def cfg_combine(
    eps_uncond: torch.Tensor, eps_cond: torch.Tensor, scale: float
) -> torch.Tensor:
    """Classifier-free guidance blend: ``eps_uncond + scale * (eps_cond - eps_uncond)``."""
    if eps_uncond.shape != eps_cond.shape:
        raise ValueError(
            f"shape mismatch: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}"
        )
    if scale < 0:
        raise ValueError(f"guidance scale must be >= 0, got {scale}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddpm_step(
    z: LatentState,
    eps: torch.Tensor,
    schedule: NoiseSchedule,
    noise: torch.Tensor | None = None,
    sigma: float = 0.0,
) -> LatentState:
    """Ancestral reverse step: posterior mean plus ``sigma * noise``.

    The mean is ``sqrt(1/alpha_t) * (z_t - beta_t / sqrt(1 - alpha_bar_t) * eps)``
    and the timestep decrements by one schedule position.
    """
    t = z.timestep
    if t < 1:
        raise ValueError("cannot step below timestep 1")
    if eps.shape != z.values.shape:
        raise ValueError(
            f"shape mismatch: latent {tuple(z.values.shape)} vs eps {tuple(eps.shape)}"
        )
    beta_t = schedule.beta(t)
    alpha_t = schedule.alpha(t)
    abar_t = schedule.alpha_bar(t)
    mean = math.sqrt(1.0 / alpha_t) * (
        z.values - beta_t / math.sqrt(1.0 - abar_t) * eps
    )
    if sigma > 0:
        if noise is None:
            raise ValueError("sigma > 0 requires a noise sample")
        if noise.shape != z.values.shape:
            raise ValueError("noise shape must match the latent")
        mean = mean + sigma * noise
    return LatentState(mean, t - 1)


def ddim_step(
    z: LatentState,
    eps: torch.Tensor,
    abar_t: float,
    abar_prev: float,
    sigma: float = 0.0,
    xi: torch.Tensor | None = None,
    prev_timestep: int | None = None,
) -> LatentState:
    """Non-Markovian reverse step; deterministic and differentiable when ``sigma = 0``.

    Computes ``sqrt(abar_prev) * (z - sqrt(1 - abar_t) * eps) / sqrt(abar_t)
    + sqrt(1 - abar_prev - sigma^2) * eps + sigma * xi``.
    """
    if not (0.0 < abar_t <= 1.0 and 0.0 < abar_prev <= 1.0):
        raise ValueError(f"alpha_bar values must lie in (0, 1], got {abar_t}, {abar_prev}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    radicand = 1.0 - abar_prev - sigma * sigma
    if radicand < 0:
        raise ValueError(
            f"sigma^2 = {sigma * sigma} exceeds 1 - abar_prev = {1.0 - abar_prev}"
        )
    if eps.shape != z.values.shape:
        raise ValueError(
            f"shape mismatch: latent {tuple(z.values.shape)} vs eps {tuple(eps.shape)}"
        )
    pred_x0 = (z.values - math.sqrt(1.0 - abar_t) * eps) / math.sqrt(abar_t)
    out = math.sqrt(abar_prev) * pred_x0 + math.sqrt(radicand) * eps
    if sigma > 0:
        if xi is None:
            raise ValueError("sigma > 0 requires a gaussian sample xi")
        out = out + sigma * xi
    t_prev = prev_timestep if prev_timestep is not None else z.timestep - 1
    return LatentState(out, t_prev)


def _stochastic_sigma(abar_t: float, abar_prev: float) -> float:
    # eta = 1 choice; collapses to 0 on the final step where abar_prev = 1.
    if abar_prev >= 1.0:
        return 0.0
    return math.sqrt((1.0 - abar_prev) / (1.0 - abar_t)) * math.sqrt(
        1.0 - abar_t / abar_prev
    )


def sample(
    z_start: LatentState,
    embedding: torch.Tensor,
    denoiser: NoisePredictor,
    schedule: NoiseSchedule,
    config: SamplerConfig,
    keep_intermediates: bool = False,
) -> DiffusionTrace:
    """Run the guided reverse chain from the seed latent down to timestep 0.

    Each step combines unconditional (all-zero embedding) and conditional noise
    estimates via classifier-free guidance and records the conditional branch's
    attention maps. In deterministic mode the whole run is a pure function of
    its inputs.
    """
    indices = schedule.timestep_indices
    if config.num_steps != len(indices):
        raise ConfigError(
            f"sampler num_steps {config.num_steps} does not match schedule "
            f"subsequence length {len(indices)}"
        )
    if z_start.timestep != int(indices[0]):
        raise ConfigError(
            f"start latent at timestep {z_start.timestep}, expected {int(indices[0])}"
        )
    uncond = torch.zeros_like(embedding)
    gen = (
        torch_generator(config.seed) if config.sigma_mode == "stochastic" else None
    )

    state = z_start
    rows: list[tuple[torch.Tensor, ...]] = []
    intermediates: list[LatentState] = []
    for i, t in enumerate(int(idx) for idx in indices):
        t_prev = int(indices[i + 1]) if i + 1 < len(indices) else 0
        eps_uncond, _ = denoiser(state.values, t, uncond)
        eps_cond, maps = denoiser(state.values, t, embedding)
        if eps_cond.shape != state.values.shape:
            raise ValueError(
                f"denoiser output shape {tuple(eps_cond.shape)} does not match "
                f"latent shape {tuple(state.values.shape)}"
            )
        if len(maps) != denoiser.num_attention_layers:
            raise RuntimeError(
                f"incomplete attention capture at step {i}: got {len(maps)} maps, "
                f"expected {denoiser.num_attention_layers}"
            )
        eps = cfg_combine(eps_uncond, eps_cond, config.guidance_scale)
        abar_t = schedule.alpha_bar(t)
        abar_prev = schedule.alpha_bar(t_prev)
        if config.sigma_mode == "stochastic":
            sigma = _stochastic_sigma(abar_t, abar_prev)
            xi = torch.randn(
                state.values.shape, generator=gen, dtype=DTYPE
            ) if sigma > 0 else None
        else:
            sigma, xi = 0.0, None
        state = ddim_step(
            state, eps, abar_t, abar_prev, sigma, xi, prev_timestep=t_prev
        )
        rows.append(tuple(maps))
        if keep_intermediates:
            intermediates.append(state)

    record = AttentionRecord(tuple(rows))
    record.validate()
    if record.grid_size != config.num_steps * denoiser.num_attention_layers:
        raise RuntimeError("incomplete attention capture after sampling run")
    return DiffusionTrace(
        z0=state,
        attention=record,
        intermediates=tuple(intermediates) if keep_intermediates else None,
    )
