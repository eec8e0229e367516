"""Detector abstraction plus desk-scale synthetic detectors.

The synthetic detectors are proposal-driven: they score candidate person
regions (the annotated boxes) with a smooth, differentiable function of the
pixels inside, and emit one detection per region whose score clears the
threshold. White-box optimization runs with ``threshold=0`` so gradients stay
alive; evaluation uses the default 0.5. External detectors plug in through a
subprocess protocol that exchanges an image file path for structured text.
"""

from __future__ import annotations

import math
import os
import subprocess
import tempfile
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .errors import DataError
from .rng import DTYPE, torch_generator

Box = tuple[float, float, float, float]

PERSON_CLASS = 0


def score_value(score: float | torch.Tensor) -> float:
    """Plain float of a score, detaching it from any autograd graph."""
    if isinstance(score, torch.Tensor):
        return float(score.detach())
    return float(score)


@dataclass(frozen=True)
class Detection:
    """One detected object: pixel box, class label, confidence score.

    The score may be a 0-dim torch tensor (kept in the autograd graph for
    white-box use) or a plain float (e.g. parsed from an external detector).
    """

    box: Box
    label: int
    score: float | torch.Tensor

    def __post_init__(self) -> None:
        x1, y1, x2, y2 = self.box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {self.box}")
        value = score_value(self.score)
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"score {value} outside [0, 1]")


@dataclass(frozen=True)
class DetectionSet:
    """Detector output for one image."""

    detections: tuple[Detection, ...] = ()

    def __iter__(self):
        return iter(self.detections)

    def __len__(self) -> int:
        return len(self.detections)

    def person_scores(self, person_class: int = PERSON_CLASS) -> list[float | torch.Tensor]:
        return [d.score for d in self.detections if d.label == person_class]


class Detector(Protocol):
    """Deterministic detector; synthetic variants require candidate regions."""

    person_class: int

    def detect(
        self, image: torch.Tensor, candidates: Sequence[Box] | None = None
    ) -> DetectionSet: ...


def _clipped_int_box(box: Box, width: int, height: int) -> tuple[int, int, int, int]:
    x1 = max(0, int(round(box[0])))
    y1 = max(0, int(round(box[1])))
    x2 = min(width, int(round(box[2])))
    y2 = min(height, int(round(box[3])))
    return x1, y1, x2, y2


@dataclass(frozen=True)
class AnalyticColorDetector:
    """Scores a region by closeness of its central pixels to a target color.

    ``score = 1 - mean((pixels - target)^2)`` over the central square of side
    ``focus * box_height``, so a region matching the target color exactly
    scores 1 and the score falls smoothly as pixels move away from it. This
    gives end-to-end tests a detector with a known optimum.
    """

    target_color: tuple[float, float, float] = (0.0, 0.0, 0.0)
    focus: float = 0.3
    threshold: float = 0.5
    person_class: int = PERSON_CLASS

    def region_score(self, image: torch.Tensor, box: Box) -> torch.Tensor:
        x1, y1, x2, y2 = box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {box}")
        side = max(1, int(round(self.focus * (y2 - y1))))
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        fx1 = int(round(cx - side / 2.0))
        fy1 = int(round(cy - side / 2.0))
        fx1, fy1, fx2, fy2 = _clipped_int_box(
            (fx1, fy1, fx1 + side, fy1 + side), image.shape[2], image.shape[1]
        )
        crop = image[:, fy1:fy2, fx1:fx2]
        target = torch.tensor(self.target_color, dtype=DTYPE)[:, None, None]
        return 1.0 - ((crop - target) ** 2).mean()

    def detect(
        self, image: torch.Tensor, candidates: Sequence[Box] | None = None
    ) -> DetectionSet:
        if candidates is None:
            raise ValueError("synthetic detector requires candidate regions")
        found = []
        for box in candidates:
            score = self.region_score(image, box)
            if score_value(score) >= self.threshold:
                found.append(Detection(box=tuple(box), label=self.person_class, score=score))
        return DetectionSet(tuple(found))


class ConvScoreDetector:
    """Fixed-seed convolutional region scorer (smooth, differentiable, deterministic)."""

    def __init__(
        self,
        seed: int = 0,
        threshold: float = 0.5,
        crop_size: int = 16,
        hidden: int = 8,
        person_class: int = PERSON_CLASS,
    ) -> None:
        gen = torch_generator(seed)
        self.threshold = threshold
        self.crop_size = crop_size
        self.person_class = person_class
        std = 1.0 / math.sqrt(9 * hidden)
        self.w_one = torch.randn((hidden, 3, 3, 3), generator=gen, dtype=DTYPE) / math.sqrt(27)
        self.w_two = torch.randn((hidden, hidden, 3, 3), generator=gen, dtype=DTYPE) * std
        self.w_head = torch.randn((hidden,), generator=gen, dtype=DTYPE) / math.sqrt(hidden)

    def region_score(self, image: torch.Tensor, box: Box) -> torch.Tensor:
        x1, y1, x2, y2 = _clipped_int_box(box, image.shape[2], image.shape[1])
        if x2 <= x1 or y2 <= y1:
            raise ValueError(f"box {box} has no overlap with the image")
        crop = image[None, :, y1:y2, x1:x2]
        crop = F.interpolate(
            crop, size=(self.crop_size, self.crop_size), mode="bilinear", align_corners=False
        )
        h = torch.tanh(F.conv2d(crop, self.w_one, padding=1))
        h = torch.tanh(F.conv2d(h, self.w_two, padding=1))
        pooled = h.mean(dim=(0, 2, 3))
        return torch.sigmoid(pooled @ self.w_head)

    def detect(
        self, image: torch.Tensor, candidates: Sequence[Box] | None = None
    ) -> DetectionSet:
        if candidates is None:
            raise ValueError("synthetic detector requires candidate regions")
        found = []
        for box in candidates:
            score = self.region_score(image, box)
            if score_value(score) >= self.threshold:
                found.append(Detection(box=tuple(box), label=self.person_class, score=score))
        return DetectionSet(tuple(found))


@dataclass(frozen=True)
class SubprocessDetector:
    """Adapter for an external detector invoked as a subprocess.

    The command is run with the path of a temporary PNG appended; it must
    print one detection per line as ``class score x1 y1 x2 y2`` (comma or
    whitespace separated). Candidate regions are ignored; the external model
    localizes on its own.
    """

    command: tuple[str, ...]
    person_class: int = PERSON_CLASS
    timeout: float = 60.0

    def detect(
        self, image: torch.Tensor, candidates: Sequence[Box] | None = None
    ) -> DetectionSet:
        pixels = (image.detach().clamp(0, 1).numpy() * 255).round().astype(np.uint8)
        handle, path = tempfile.mkstemp(suffix=".png")
        os.close(handle)
        try:
            Image.fromarray(pixels.transpose(1, 2, 0)).save(path)
            proc = subprocess.run(
                [*self.command, path],
                capture_output=True,
                text=True,
                timeout=self.timeout,
            )
            if proc.returncode != 0:
                raise DataError(
                    f"external detector exited with {proc.returncode}: {proc.stderr.strip()}"
                )
            return DetectionSet(tuple(self._parse(proc.stdout)))
        finally:
            os.unlink(path)

    @staticmethod
    def _parse(text: str) -> list[Detection]:
        found = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            tokens = line.replace(",", " ").split()
            if len(tokens) != 6:
                raise DataError(
                    f"external detector line {lineno}: expected "
                    f"'class score x1 y1 x2 y2', got {line!r}"
                )
            try:
                label = int(tokens[0])
                score = float(tokens[1])
                box = tuple(float(v) for v in tokens[2:])
            except ValueError as exc:
                raise DataError(f"external detector line {lineno}: {exc}") from exc
            found.append(Detection(box=box, label=label, score=score))
        return found
