"""End-to-end latent optimization.

One run: draw the seed latent, sample once to capture the anchors (initial
attention grid and clean latent), then per epoch re-sample from the current
seed latent, decode, transform-and-place the patch onto every annotated person
box, score with the detector, assemble the weighted objective, and take an
Adam step on the seed latent. Gradients flow through the entire sampling
chain; nothing is truncated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .attack import AdversarialPatch, EOTConfig, apply_transform, attack_loss, place_patch, sample_transform
from .conditioning import embed_prompt
from .detectors import Detector
from .errors import DataError, NumericalError
from .losses import LossWeights, RunAnchors, latent_alignment_loss, prompt_alignment_loss, total_loss
from .nets import ConvDecoder, ConvDenoiser
from .rng import DTYPE, stable_seed, torch_generator
from .sampler import DiffusionTrace, LatentState, SamplerConfig, sample
from .schedule import NoiseSchedule, build_schedule


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 5e-3
    epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")


@dataclass(frozen=True)
class AdamState:
    """First/second moment accumulators and the step counter."""

    m: torch.Tensor
    v: torch.Tensor
    step: int = 0

    @classmethod
    def zeros_like(cls, value: torch.Tensor) -> "AdamState":
        return cls(m=torch.zeros_like(value), v=torch.zeros_like(value), step=0)


def adam_step(
    value: torch.Tensor,
    gradient: torch.Tensor,
    state: AdamState,
    config: OptimizerConfig,
) -> tuple[torch.Tensor, AdamState]:
    """Textbook Adam update with bias correction."""
    if gradient.shape != value.shape:
        raise ValueError(
            f"gradient shape {tuple(gradient.shape)} does not match value "
            f"shape {tuple(value.shape)}"
        )
    if not bool(torch.isfinite(gradient).all()):
        raise NumericalError("non-finite gradient in Adam step")
    step = state.step + 1
    m = config.adam_beta1 * state.m + (1.0 - config.adam_beta1) * gradient
    v = config.adam_beta2 * state.v + (1.0 - config.adam_beta2) * gradient**2
    m_hat = m / (1.0 - config.adam_beta1**step)
    v_hat = v / (1.0 - config.adam_beta2**step)
    new_value = value - config.learning_rate * m_hat / (torch.sqrt(v_hat) + config.adam_eps)
    return new_value, AdamState(m=m, v=v, step=step)


@dataclass(frozen=True)
class PatchPipeline:
    """Fixed components of one generation run."""

    schedule: NoiseSchedule
    denoiser: ConvDenoiser
    decoder: ConvDecoder
    sampler: SamplerConfig
    latent_shape: tuple[int, int, int] = (4, 8, 8)
    token_count: int = 8
    text_dim: int = 16


def build_pipeline(
    seed: int,
    timesteps: int = 1000,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    num_steps: int = 7,
    guidance_scale: float = 7.5,
    sigma_mode: str = "deterministic",
    latent_shape: tuple[int, int, int] = (4, 8, 8),
    token_count: int = 8,
    text_dim: int = 16,
) -> PatchPipeline:
    """Assemble schedule, denoiser, decoder, and sampler config from one seed."""
    schedule = build_schedule(timesteps, beta_start, beta_end, num_steps)
    denoiser = ConvDenoiser(
        schedule,
        seed=stable_seed(seed, "denoiser"),
        latent_channels=latent_shape[0],
        text_dim=text_dim,
    )
    decoder = ConvDecoder(
        seed=stable_seed(seed, "decoder"), latent_channels=latent_shape[0]
    )
    sampler = SamplerConfig(
        num_steps=num_steps,
        guidance_scale=guidance_scale,
        sigma_mode=sigma_mode,  # type: ignore[arg-type]
        seed=stable_seed(seed, "sampler"),
    )
    return PatchPipeline(
        schedule=schedule,
        denoiser=denoiser,
        decoder=decoder,
        sampler=sampler,
        latent_shape=latent_shape,
        token_count=token_count,
        text_dim=text_dim,
    )


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    attack: float
    prompt: float
    latent: float
    total: float


@dataclass
class RunState:
    """Mutable optimization state; anchors are immutable after initialization."""

    z_seed: torch.Tensor
    embedding: torch.Tensor
    anchors: RunAnchors
    adam: AdamState
    pipeline: PatchPipeline
    prompt: str
    run_seed: int
    epoch: int = 0
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    best_total: float = math.inf
    best_z0: torch.Tensor | None = None


@dataclass(frozen=True)
class AnnotatedImage:
    """One dataset record: image tensor in [0, 1] plus its person boxes."""

    path: str
    image: torch.Tensor
    boxes: tuple[tuple[float, float, float, float], ...]


def _start_state(pipeline: PatchPipeline, values: torch.Tensor) -> LatentState:
    return LatentState(values, int(pipeline.schedule.timestep_indices[0]))


def run_sampler(pipeline: PatchPipeline, z_values: torch.Tensor, embedding: torch.Tensor) -> DiffusionTrace:
    return sample(
        _start_state(pipeline, z_values),
        embedding,
        pipeline.denoiser,
        pipeline.schedule,
        pipeline.sampler,
    )


def initialize_run(pipeline: PatchPipeline, prompt: str, seed: int) -> RunState:
    """Draw the seed latent from N(0, I) and capture the run anchors."""
    gen = torch_generator(stable_seed(seed, "latent"))
    z_seed = torch.randn(pipeline.latent_shape, generator=gen, dtype=DTYPE)
    embedding = embed_prompt(
        prompt,
        token_count=pipeline.token_count,
        dim=pipeline.text_dim,
        seed=stable_seed(seed, "prompt"),
    )
    trace = run_sampler(pipeline, z_seed, embedding)
    anchors = RunAnchors(
        attention_initial=trace.attention.detach(),
        z0_initial=LatentState(trace.z0.values.detach().clone(), 0),
    )
    return RunState(
        z_seed=z_seed,
        embedding=embedding,
        anchors=anchors,
        adam=AdamState.zeros_like(z_seed),
        pipeline=pipeline,
        prompt=prompt,
        run_seed=seed,
    )


def evaluate_losses(
    state: RunState,
    z_values: torch.Tensor,
    dataset: Sequence[AnnotatedImage],
    detector: Detector,
    eot: EOTConfig,
    weights: LossWeights,
    patch_scale: float,
    eot_seed: int,
) -> tuple[torch.Tensor, dict[str, torch.Tensor], DiffusionTrace]:
    """Assemble the weighted objective for one setting of the seed latent.

    The EOT draws are a pure function of ``eot_seed``, so repeated calls with
    identical arguments produce identical losses (required both for rerun
    determinism and for finite-difference gradient checks).
    """
    pipeline = state.pipeline
    trace = run_sampler(pipeline, z_values, state.embedding)
    patch_pixels = pipeline.decoder.decode(trace.z0)

    rng = np.random.default_rng(eot_seed)
    detections = []
    for record in dataset:
        for _ in range(eot.samples_per_image):
            params = sample_transform(rng, eot, tuple(patch_pixels.shape))
            transformed, mask = apply_transform(patch_pixels, params)
            adversarial = record.image
            for box in record.boxes:
                adversarial = place_patch(
                    adversarial, transformed, box, patch_scale, params.translation, mask
                )
            detections.append(detector.detect(adversarial, candidates=record.boxes))

    l_attack = attack_loss(detections, detector.person_class)
    l_prompt = prompt_alignment_loss(trace.attention, state.anchors.attention_initial)
    l_latent = latent_alignment_loss(trace.z0, state.anchors.z0_initial)
    total = total_loss(l_attack, l_prompt, l_latent, weights)
    components = {"attack": l_attack, "prompt": l_prompt, "latent": l_latent}
    return total, components, trace


def optimize(
    state: RunState,
    dataset: Sequence[AnnotatedImage],
    detector: Detector,
    eot: EOTConfig,
    opt: OptimizerConfig,
    patch_scale: float = 0.4,
) -> tuple[AdversarialPatch, RunState]:
    """Run the optimization loop and decode the patch from the best epoch.

    History gets one row per epoch with the component losses measured before
    that epoch's update; the returned patch decodes the clean latent of the
    epoch with the lowest total loss.
    """
    if len(dataset) == 0:
        raise DataError("dataset is empty")
    pipeline = state.pipeline
    for _ in range(opt.epochs):
        z = state.z_seed.clone().requires_grad_(True)
        eot_seed = stable_seed(opt.seed, "eot", state.epoch)
        total, components, trace = evaluate_losses(
            state, z, dataset, detector, eot, opt.weights, patch_scale, eot_seed
        )
        values = {k: float(v.detach()) for k, v in components.items()}
        if not math.isfinite(float(total.detach())):
            raise NumericalError(
                "non-finite total loss at epoch "
                f"{state.epoch}: attack={values['attack']}, "
                f"prompt={values['prompt']}, latent={values['latent']}"
            )
        state.history.append(
            EpochRecord(
                epoch=state.epoch,
                attack=values["attack"],
                prompt=values["prompt"],
                latent=values["latent"],
                total=float(total.detach()),
            )
        )
        if float(total.detach()) < state.best_total:
            state.best_total = float(total.detach())
            state.best_epoch = state.epoch
            state.best_z0 = trace.z0.values.detach().clone()

        (gradient,) = torch.autograd.grad(total, z)
        new_z, state.adam = adam_step(state.z_seed, gradient, state.adam, opt)
        state.z_seed = new_z.detach()
        state.epoch += 1

    assert state.best_z0 is not None
    patch_pixels = pipeline.decoder.decode(LatentState(state.best_z0, 0))
    best = state.history[state.best_epoch]
    patch = AdversarialPatch(
        pixels=patch_pixels.detach().numpy(),
        metadata={
            "prompt": state.prompt,
            "seed": state.run_seed,
            "weights": {
                "alpha": opt.weights.alpha,
                "beta": opt.weights.beta,
                "gamma": opt.weights.gamma,
            },
            "epoch": state.best_epoch,
            "losses": {
                "attack": best.attack,
                "prompt": best.prompt,
                "latent": best.latent,
                "total": best.total,
            },
            "attention_maps": pipeline.sampler.num_steps
            * pipeline.denoiser.num_attention_layers,
        },
    )
    return patch, state
