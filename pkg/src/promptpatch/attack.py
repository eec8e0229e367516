"""Patch transformation, placement, and the attack objective.

Transform draws simulate real-world variation (contrast, brightness, sensor
noise, rotation, placement jitter) and are applied in that fixed order so runs
are reproducible. Every operation here is differentiable with respect to the
patch pixels: the whole path from decoded patch to detector confidence admits
gradient descent.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .detectors import Box, DetectionSet, PERSON_CLASS
from .rng import DTYPE


@dataclass(frozen=True)
class EOTConfig:
    """Ranges for the expectation-over-transformation draws."""

    contrast_range: tuple[float, float] = (0.8, 1.2)
    brightness_range: float = 0.1
    noise_range: float = 0.1
    rotate_range: float = 20.0
    location_range: float = 0.1
    samples_per_image: int = 1

    def __post_init__(self) -> None:
        lo, hi = self.contrast_range
        if lo > hi:
            raise ValueError(f"contrast range {self.contrast_range} is not well ordered")
        for name in ("brightness_range", "noise_range", "rotate_range", "location_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.samples_per_image < 1:
            raise ValueError("samples_per_image must be >= 1")

    @classmethod
    def identity(cls, samples_per_image: int = 1) -> "EOTConfig":
        """All ranges collapsed to a point: the fixed, no-op transform."""
        return cls(
            contrast_range=(1.0, 1.0),
            brightness_range=0.0,
            noise_range=0.0,
            rotate_range=0.0,
            location_range=0.0,
            samples_per_image=samples_per_image,
        )


@dataclass(frozen=True)
class TransformParams:
    """One concrete transform draw."""

    contrast: float
    brightness: float
    noise: np.ndarray
    rotate_degrees: float
    translation: tuple[float, float]


def sample_transform(
    rng: np.random.Generator, config: EOTConfig, patch_shape: tuple[int, ...]
) -> TransformParams:
    """Draw transform parameters uniformly within the configured ranges."""
    lo, hi = config.contrast_range
    return TransformParams(
        contrast=float(rng.uniform(lo, hi)),
        brightness=float(rng.uniform(-config.brightness_range, config.brightness_range)),
        noise=rng.uniform(-config.noise_range, config.noise_range, size=patch_shape),
        rotate_degrees=float(rng.uniform(-config.rotate_range, config.rotate_range)),
        translation=(
            float(rng.uniform(-config.location_range, config.location_range)),
            float(rng.uniform(-config.location_range, config.location_range)),
        ),
    )


def _rotate(pixels: torch.Tensor, degrees: float) -> tuple[torch.Tensor, torch.Tensor]:
    """Rotate about the patch center with bilinear sampling and zero padding.

    Returns the rotated pixels and the coverage mask (1 inside the rotated
    footprint, 0 in the padded corners, fractional on the boundary).
    """
    _, height, width = pixels.shape
    if degrees == 0.0:
        return pixels, torch.ones((1, height, width), dtype=DTYPE)
    theta = math.radians(degrees)
    ys = torch.linspace(-1.0, 1.0, height, dtype=DTYPE)
    xs = torch.linspace(-1.0, 1.0, width, dtype=DTYPE)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    src_x = cos_t * gx + sin_t * gy
    src_y = -sin_t * gx + cos_t * gy
    grid = torch.stack((src_x, src_y), dim=-1)[None]
    rotated = F.grid_sample(
        pixels[None], grid, mode="bilinear", padding_mode="zeros", align_corners=True
    )[0]
    mask = F.grid_sample(
        torch.ones((1, 1, height, width), dtype=DTYPE),
        grid,
        mode="bilinear",
        padding_mode="zeros",
        align_corners=True,
    )[0]
    return rotated, mask


def apply_transform(
    pixels: torch.Tensor, params: TransformParams
) -> tuple[torch.Tensor, torch.Tensor]:
    """Contrast -> brightness -> noise -> rotation, then clamp to [0, 1].

    Contrast pivots at 0.5, so mid-gray is a fixed point of any contrast
    factor. Returns the transformed pixels and the rotation coverage mask
    consumed by :func:`place_patch`.
    """
    out = params.contrast * (pixels - 0.5) + 0.5
    out = out + params.brightness
    out = out + torch.as_tensor(params.noise, dtype=DTYPE)
    out, mask = _rotate(out, params.rotate_degrees)
    return out.clamp(0.0, 1.0), mask


def placement_region(
    box: Box, scale: float, translation: tuple[float, float] = (0.0, 0.0)
) -> tuple[int, int, int, int]:
    """Square placement region: side ``scale * box_height``, centered on the box,
    shifted by ``translation`` as a fraction of the side. May exceed image bounds."""
    x1, y1, x2, y2 = box
    if not (x1 < x2 and y1 < y2):
        raise ValueError(f"degenerate box {box}")
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"scale must lie in (0, 1], got {scale}")
    side = int(round(scale * (y2 - y1)))
    cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
    ox = int(round(translation[0] * side))
    oy = int(round(translation[1] * side))
    rx1 = int(round(cx - side / 2.0)) + ox
    ry1 = int(round(cy - side / 2.0)) + oy
    return rx1, ry1, rx1 + side, ry1 + side


def place_patch(
    image: torch.Tensor,
    patch: torch.Tensor,
    box: Box,
    scale: float,
    translation: tuple[float, float] = (0.0, 0.0),
    mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Composite the patch into the placement region of one person box.

    The patch (and its coverage mask) is resampled bilinearly to the region
    size; pixels outside the region, and region pixels the rotated patch does
    not cover, keep their original values. Regions that exit the image are
    clipped with a warning.
    """
    rx1, ry1, rx2, ry2 = placement_region(box, scale, translation)
    side = rx2 - rx1
    if side == 0:
        return image
    _, height, width = image.shape
    cx1, cy1 = max(rx1, 0), max(ry1, 0)
    cx2, cy2 = min(rx2, width), min(ry2, height)
    if cx1 != rx1 or cy1 != ry1 or cx2 != rx2 or cy2 != ry2:
        warnings.warn(
            f"placement region ({rx1}, {ry1}, {rx2}, {ry2}) exits image bounds "
            f"{width}x{height}; clipping",
            stacklevel=2,
        )
    if cx2 <= cx1 or cy2 <= cy1:
        return image

    resized = F.interpolate(patch[None], size=(side, side), mode="bilinear", align_corners=False)[0]
    if mask is None:
        mask = torch.ones((1,) + tuple(patch.shape[1:]), dtype=DTYPE)
    resized_mask = F.interpolate(mask[None], size=(side, side), mode="bilinear", align_corners=False)[0]
    resized_mask = resized_mask.clamp(0.0, 1.0)

    sub_patch = resized[:, cy1 - ry1 : cy2 - ry1, cx1 - rx1 : cx2 - rx1]
    sub_mask = resized_mask[:, cy1 - ry1 : cy2 - ry1, cx1 - rx1 : cx2 - rx1]
    out = image.clone()
    region = out[:, cy1:cy2, cx1:cx2]
    out[:, cy1:cy2, cx1:cx2] = region * (1.0 - sub_mask) + sub_patch * sub_mask
    return out


def attack_loss(
    detections: Sequence[DetectionSet], person_class: int = PERSON_CLASS
) -> torch.Tensor:
    """Mean over images of the maximum person confidence (0 when none detected)."""
    if len(detections) == 0:
        raise ValueError("attack loss requires at least one detection set")
    per_image = []
    for det_set in detections:
        scores = [
            torch.as_tensor(s, dtype=DTYPE) for s in det_set.person_scores(person_class)
        ]
        if scores:
            per_image.append(torch.stack(scores).max())
        else:
            per_image.append(torch.zeros((), dtype=DTYPE))
    return torch.stack(per_image).mean()


@dataclass(frozen=True)
class AdversarialPatch:
    """Decoded patch image in [0, 1] plus generation metadata."""

    pixels: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3:
            raise ValueError(f"patch must have shape (3, H, W), got {self.pixels.shape}")
        if self.pixels.min() < 0.0 or self.pixels.max() > 1.0:
            raise ValueError("patch pixels must lie in [0, 1]")

    def to_uint8(self) -> np.ndarray:
        return (self.pixels * 255).round().astype(np.uint8)

    def as_tensor(self) -> torch.Tensor:
        return torch.as_tensor(self.pixels, dtype=DTYPE)
