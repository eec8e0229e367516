"""Run configuration: defaults, validation, JSON round-trip, env override.

A config serializes to JSON next to every run's outputs; loading that file
back reproduces the run byte-for-byte. Component seeds are derived from the
single top-level seed, and ``PROMPTPATCH_SEED`` overrides it globally.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .attack import EOTConfig
from .errors import ConfigError
from .losses import LossWeights
from .optimizer import OptimizerConfig, PatchPipeline, build_pipeline
from .sampler import SamplerConfig

SEED_ENV_VAR = "PROMPTPATCH_SEED"
DEFAULT_PROMPT = "a picture full of leaf-like green colors"

DETECTOR_CHOICES = ("analytic", "conv")


@dataclass(frozen=True)
class RunConfig:
    prompt: str = DEFAULT_PROMPT
    seed: int = 0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    num_steps: int = 7
    guidance_scale: float = 7.5
    sigma_mode: str = "deterministic"
    learning_rate: float = 5e-3
    epochs: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 1.0
    beta: float = 5.0
    gamma: float = 0.1
    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: float = 0.1
    noise_range: float = 0.1
    rotate_range: float = 20.0
    location_range: float = 0.1
    samples_per_image: int = 1
    patch_scale: float = 0.4
    dataset: str = ""
    detector: str = "analytic"
    output_dir: str = "runs/patch"

    def validate(self) -> None:
        """Validate every range; raises ConfigError before any work starts."""
        try:
            self.sampler_config()
            self.optimizer_config()
            self.eot_config()
        except (ValueError, ConfigError) as exc:
            raise ConfigError(str(exc)) from exc
        if not self.prompt.split():
            raise ConfigError("prompt must contain at least one token")
        if self.timesteps < 1 or not (0 < self.beta_start <= self.beta_end < 1):
            raise ConfigError(
                f"invalid schedule: timesteps={self.timesteps}, "
                f"beta=[{self.beta_start}, {self.beta_end}]"
            )
        if self.num_steps > self.timesteps:
            raise ConfigError(
                f"num_steps {self.num_steps} exceeds timesteps {self.timesteps}"
            )
        if not 0.0 < self.patch_scale <= 1.0:
            raise ConfigError(f"patch_scale must lie in (0, 1], got {self.patch_scale}")
        if self.detector not in DETECTOR_CHOICES:
            raise ConfigError(
                f"unknown detector {self.detector!r}; choose from {DETECTOR_CHOICES}"
            )

    def sampler_config(self) -> SamplerConfig:
        from .rng import stable_seed

        return SamplerConfig(
            num_steps=self.num_steps,
            guidance_scale=self.guidance_scale,
            sigma_mode=self.sigma_mode,  # type: ignore[arg-type]
            seed=stable_seed(self.seed, "sampler"),
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            adam_beta1=self.adam_beta1,
            adam_beta2=self.adam_beta2,
            adam_eps=self.adam_eps,
            seed=self.seed,
            weights=LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma),
        )

    def eot_config(self) -> EOTConfig:
        return EOTConfig(
            contrast_range=tuple(self.contrast_range),
            brightness_range=self.brightness_range,
            noise_range=self.noise_range,
            rotate_range=self.rotate_range,
            location_range=self.location_range,
            samples_per_image=self.samples_per_image,
        )

    def pipeline(self) -> PatchPipeline:
        return build_pipeline(
            self.seed,
            timesteps=self.timesteps,
            beta_start=self.beta_start,
            beta_end=self.beta_end,
            num_steps=self.num_steps,
            guidance_scale=self.guidance_scale,
            sigma_mode=self.sigma_mode,
        )

    def to_dict(self) -> dict:
        data = asdict(self)
        data["contrast_range"] = list(self.contrast_range)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "contrast_range" in data:
            data = dict(data)
            data["contrast_range"] = tuple(data["contrast_range"])
        return cls(**data)


def load_config(path: str | Path | None = None, **overrides) -> RunConfig:
    """Load a config file (when given), apply overrides, then the env seed."""
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
        config = RunConfig.from_dict(data)
    else:
        config = RunConfig()
    overrides = {k: v for k, v in overrides.items() if v is not None}
    if overrides:
        config = replace(config, **overrides)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        try:
            config = replace(config, seed=int(env_seed))
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV_VAR} must be an integer: {env_seed!r}") from exc
    return config


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
