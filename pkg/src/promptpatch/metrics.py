"""Evaluation metrics: IoU, person-class AP at IoU 0.5, frame ASR, Likert stats.

Average precision uses continuous (all-points) interpolation of the
precision envelope; predictions match greedily, in descending score order,
to the highest-IoU unmatched ground-truth box of the same image.
"""

from __future__ import annotations

import statistics
from typing import Iterable, Sequence

from .detectors import Box, DetectionSet, PERSON_CLASS, score_value


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two pixel boxes."""
    for box in (a, b):
        x1, y1, x2, y2 = box
        if not (x1 < x2 and y1 < y2):
            raise ValueError(f"degenerate box {box}")
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / (area_a + area_b - inter)


def map50(
    predictions: Sequence[DetectionSet],
    ground_truth: Sequence[Sequence[Box]],
    person_class: int = PERSON_CLASS,
    iou_threshold: float = 0.5,
) -> float:
    """Person-class average precision at the given IoU threshold."""
    if len(predictions) != len(ground_truth):
        raise ValueError(
            f"{len(predictions)} prediction sets vs {len(ground_truth)} ground-truth images"
        )
    total_gt = sum(len(boxes) for boxes in ground_truth)
    if total_gt == 0:
        raise ValueError("average precision undefined: no ground-truth boxes")

    flat = []
    for image_idx, det_set in enumerate(predictions):
        for det in det_set:
            if det.label == person_class:
                flat.append((image_idx, det.box, score_value(det.score)))
    flat.sort(key=lambda item: -item[2])

    matched: list[set[int]] = [set() for _ in ground_truth]
    tp_flags = []
    for image_idx, box, _ in flat:
        best_iou, best_gt = 0.0, -1
        for gt_idx, gt_box in enumerate(ground_truth[image_idx]):
            if gt_idx in matched[image_idx]:
                continue
            overlap = iou(box, gt_box)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou, best_gt = overlap, gt_idx
        if best_gt >= 0:
            matched[image_idx].add(best_gt)
            tp_flags.append(True)
        else:
            tp_flags.append(False)

    if not tp_flags:
        return 0.0
    precisions, recalls = [], []
    tp = 0
    for rank, flag in enumerate(tp_flags, start=1):
        tp += int(flag)
        precisions.append(tp / rank)
        recalls.append(tp / total_gt)

    # Precision envelope from the right, integrated over recall steps.
    envelope = precisions[:]
    for k in range(len(envelope) - 2, -1, -1):
        envelope[k] = max(envelope[k], envelope[k + 1])
    ap = 0.0
    prev_recall = 0.0
    for recall, prec in zip(recalls, envelope):
        ap += (recall - prev_recall) * prec
        prev_recall = recall
    return ap


def asr(frames: Sequence[bool]) -> float:
    """Percentage of frames where the subject evaded detection."""
    if len(frames) == 0:
        raise ValueError("frame sequence is empty")
    return 100.0 * sum(bool(f) for f in frames) / len(frames)


def mean_asr(per_posture: Sequence[float]) -> float:
    """Arithmetic mean of per-posture attack success rates."""
    if len(per_posture) == 0:
        raise ValueError("no posture values")
    return sum(per_posture) / len(per_posture)


def frame_outcome(
    detections: DetectionSet | Iterable,
    subject_box: Box,
    score_threshold: float = 0.5,
    person_class: int = PERSON_CLASS,
) -> bool:
    """Evasion predicate: no person detection at or above the threshold overlaps
    the subject region (any positive intersection counts as overlap)."""
    x1, y1, x2, y2 = subject_box
    for det in detections:
        if det.label != person_class or score_value(det.score) < score_threshold:
            continue
        bx1, by1, bx2, by2 = det.box
        if min(x2, bx2) > max(x1, bx1) and min(y2, by2) > max(y1, by1):
            return False
    return True


def likert_summary(scores: Sequence[int]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation of 7-point Likert scores."""
    if len(scores) < 2:
        raise ValueError("need at least two scores for a sample standard deviation")
    for s in scores:
        if not 1 <= s <= 7:
            raise ValueError(f"score {s} outside the 7-point scale")
    return statistics.fmean(scores), statistics.stdev(scores)
