"""Dataset ingestion: annotation files, image loading, synthetic data.

Annotation format (newline-delimited, diff-friendly): one record per image,

    relative/path.png x1,y1,x2,y2 [x1,y1,x2,y2 ...]

with box coordinates in pixels. Lines starting with ``#`` and blank lines are
ignored. Paths resolve relative to the annotation file's directory.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from PIL import Image

from .detectors import Box
from .errors import DataError
from .optimizer import AnnotatedImage
from .rng import DTYPE


@dataclass(frozen=True)
class AnnotationRecord:
    image_path: str
    boxes: tuple[Box, ...]


def parse_annotations(path: str | Path) -> list[AnnotationRecord]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"annotation file not found: {path}")
    records = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        tokens = line.split()
        if len(tokens) < 2:
            raise DataError(f"{path}:{lineno}: expected an image path and at least one box")
        boxes = []
        for token in tokens[1:]:
            parts = token.split(",")
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: box {token!r} is not x1,y1,x2,y2")
            try:
                box = tuple(float(p) for p in parts)
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
            if not (box[0] < box[2] and box[1] < box[3]):
                raise DataError(f"{path}:{lineno}: degenerate box {token}")
            boxes.append(box)
        records.append(AnnotationRecord(image_path=tokens[0], boxes=tuple(boxes)))
    return records


def save_annotations(records: Iterable[AnnotationRecord], path: str | Path) -> None:
    lines = []
    for rec in records:
        boxes = " ".join(",".join(f"{v:g}" for v in box) for box in rec.boxes)
        lines.append(f"{rec.image_path} {boxes}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_image(path: str | Path) -> torch.Tensor:
    """Load an RGB image as a (3, H, W) float64 tensor in [0, 1]."""
    with Image.open(path) as img:
        array = np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0
    return torch.as_tensor(array.transpose(2, 0, 1), dtype=DTYPE)


def load_dataset(annotation_path: str | Path) -> list[AnnotatedImage]:
    """Load every annotated image, collecting all bad records into one error."""
    annotation_path = Path(annotation_path)
    records = parse_annotations(annotation_path)
    if not records:
        raise DataError(f"{annotation_path}: no annotation records")
    root = annotation_path.parent
    problems = []
    dataset = []
    for rec in records:
        image_file = root / rec.image_path
        if not image_file.is_file():
            problems.append(f"{rec.image_path}: image file missing")
            continue
        image = load_image(image_file)
        _, height, width = image.shape
        bad = [
            box
            for box in rec.boxes
            if box[0] < 0 or box[1] < 0 or box[2] > width or box[3] > height
        ]
        if bad:
            problems.append(f"{rec.image_path}: boxes outside {width}x{height}: {bad}")
            continue
        dataset.append(AnnotatedImage(path=str(image_file), image=image, boxes=rec.boxes))
    if problems:
        raise DataError(
            "dataset has invalid records:\n  " + "\n  ".join(problems)
        )
    return dataset


def synthesize_dataset(
    directory: str | Path,
    images: int = 8,
    image_size: int = 96,
    seed: int = 0,
) -> Path:
    """Write a small synthetic pedestrian dataset and return the annotation path.

    Each image is a bright background with one or two dark person silhouettes;
    the annotated box frames a silhouette whose center region stays dark, which
    is what the analytic detector keys on.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for idx in range(images):
        canvas = 0.93 + rng.uniform(-0.04, 0.04, size=(image_size, image_size, 3))
        num_boxes = 2 if idx % 4 == 3 else 1
        boxes = []
        for b in range(num_boxes):
            box_h = int(rng.integers(44, 60))
            box_w = int(box_h * rng.uniform(0.55, 0.7))
            max_x = image_size - box_w - 2
            max_y = image_size - box_h - 2
            if num_boxes == 2:
                x1 = 2 + b * (image_size // 2 - box_w // 2)
                x1 = min(x1, max_x)
            else:
                x1 = int(rng.integers(2, max(3, max_x)))
            y1 = int(rng.integers(2, max(3, max_y)))
            x2, y2 = x1 + box_w, y1 + box_h
            # Dark torso block covering the box center.
            tw, th = int(box_w * 0.8), int(box_h * 0.6)
            tx = x1 + (box_w - tw) // 2
            ty = y1 + (box_h - th) // 2
            shade = 0.05 + rng.uniform(0.0, 0.04)
            canvas[ty : ty + th, tx : tx + tw, :] = shade + rng.uniform(
                0.0, 0.02, size=(th, tw, 3)
            )
            boxes.append((float(x1), float(y1), float(x2), float(y2)))
        name = f"image_{idx:03d}.png"
        pixels = (np.clip(canvas, 0.0, 1.0) * 255).round().astype(np.uint8)
        Image.fromarray(pixels).save(directory / name)
        records.append(AnnotationRecord(image_path=name, boxes=tuple(boxes)))
    annotation_path = directory / "annotations.txt"
    save_annotations(records, annotation_path)
    return annotation_path


_INRIA_IMAGE = re.compile(r'Image filename\s*:\s*"(?P<path>[^"]+)"')
_INRIA_BOX = re.compile(
    r"Bounding box for object \d+ \"PASperson\".*?:\s*"
    r"\((?P<x1>\d+),\s*(?P<y1>\d+)\)\s*-\s*\((?P<x2>\d+),\s*(?P<y2>\d+)\)"
)


def record_from_inria(text: str) -> AnnotationRecord:
    """Convert one INRIA-style annotation file body to an :class:`AnnotationRecord`.

    INRIA pedestrian annotations carry an ``Image filename : "..."`` line and one
    ``Bounding box for object N "PASperson" ... : (x1, y1) - (x2, y2)`` line per
    person; this maps them straight onto the newline-delimited format above.
    """
    image_match = _INRIA_IMAGE.search(text)
    if image_match is None:
        raise DataError("no 'Image filename' line in annotation text")
    boxes = [
        (float(m["x1"]), float(m["y1"]), float(m["x2"]), float(m["y2"]))
        for m in _INRIA_BOX.finditer(text)
    ]
    if not boxes:
        raise DataError("no PASperson bounding boxes in annotation text")
    return AnnotationRecord(image_path=image_match["path"], boxes=tuple(boxes))


def convert_inria_annotations(
    annotation_files: Sequence[str | Path], output_path: str | Path
) -> list[AnnotationRecord]:
    """Convert a batch of INRIA-style annotation files into one annotation file."""
    records = [record_from_inria(Path(f).read_text(errors="ignore")) for f in annotation_files]
    save_annotations(records, output_path)
    return records
