"""Alignment losses and the weighted total objective.

The prompt alignment loss penalizes cosine drift of the current attention
grid away from the grid captured before optimization started; the latent
alignment loss penalizes drift of the clean latent away from its initial
value through a saturating squared-difference map. Both are exactly zero at
the anchors and differentiable everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .rng import DTYPE
from .sampler import AttentionRecord, LatentState


@dataclass(frozen=True)
class LossWeights:
    """Weights for (attack, prompt alignment, latent alignment)."""

    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 0.1

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha == self.beta == self.gamma == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class RunAnchors:
    """Initial attention grid and clean latent, captured once before optimization."""

    attention_initial: AttentionRecord
    z0_initial: LatentState


def _as_values(latent: LatentState | torch.Tensor) -> torch.Tensor:
    if isinstance(latent, LatentState):
        if latent.timestep != 0:
            raise ValueError("latent alignment is defined on timestep-0 latents")
        return latent.values
    return latent


def prompt_alignment_loss(
    current: AttentionRecord, initial: AttentionRecord
) -> torch.Tensor:
    """One minus the mean cosine similarity over all (step, layer) map pairs.

    Zero iff every current map is positively parallel to its anchor; at most 2.
    Each cosine deficit is evaluated as ``0.5 * ||a/|a| - b/|b|||^2`` (equal to
    ``1 - cos`` for any vectors), so an unchanged grid yields exactly zero loss
    and an exactly zero gradient rather than float dust.
    """
    if (current.num_steps, current.num_layers) != (
        initial.num_steps,
        initial.num_layers,
    ):
        raise ValueError(
            f"attention grids differ: {current.num_steps}x{current.num_layers} "
            f"vs {initial.num_steps}x{initial.num_layers}"
        )
    deficits = []
    for cur, init in zip(current.flat(), initial.flat()):
        if cur.shape != init.shape:
            raise ValueError(
                f"attention map shapes differ: {tuple(cur.shape)} vs {tuple(init.shape)}"
            )
        a = cur.reshape(-1)
        b = init.reshape(-1)
        norm_a = torch.sqrt(a @ a)
        norm_b = torch.sqrt(b @ b)
        if float(norm_a.detach()) == 0.0 or float(norm_b.detach()) == 0.0:
            raise ValueError("zero-norm attention map; cosine similarity undefined")
        deficits.append(0.5 * ((a / norm_a - b / norm_b) ** 2).sum())
    return torch.stack(deficits).mean()


def latent_alignment_loss(
    z0: LatentState | torch.Tensor, z0_initial: LatentState | torch.Tensor
) -> torch.Tensor:
    """Mean of ``1 - exp(-(z0 - z0_initial)^2)`` over latent entries.

    Zero iff the latents are identical; approaches 1 as they drift apart.
    """
    a = _as_values(z0)
    b = _as_values(z0_initial)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (1.0 - torch.exp(-((a - b) ** 2))).mean()


def total_loss(
    l_attack: torch.Tensor | float,
    l_prompt: torch.Tensor | float,
    l_latent: torch.Tensor | float,
    weights: LossWeights,
) -> torch.Tensor:
    """Weighted sum ``alpha * attack + beta * prompt + gamma * latent``."""
    components = []
    for name, value in (
        ("attack", l_attack),
        ("prompt", l_prompt),
        ("latent", l_latent),
    ):
        tensor = torch.as_tensor(value, dtype=DTYPE)
        if not math.isfinite(float(tensor.detach())):
            raise ValueError(f"non-finite {name} loss: {float(tensor.detach())}")
        components.append(tensor)
    return (
        weights.alpha * components[0]
        + weights.beta * components[1]
        + weights.gamma * components[2]
    )
