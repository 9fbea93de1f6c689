"""Pseudo-label selection from teacher predictions with an online calibrator.

Each teacher prediction is compared with the sparse ground truth of its image
(same class only). Predictions that overlap nothing become pseudo-label
candidates and are kept when their calibrated score clears ``tau_s``;
predictions that overlap an annotation feed the calibration queue, labelled
positive when the overlap also clears the stricter ``tau_plus``. Every
``refit_interval`` steps the calibrator is refitted on the queue.

A fixed log-shaped score schedule (:func:`dynamic_threshold`) is provided as
the uncalibrated baseline.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .calibration import (
    CalibrationQueue,
    CalibrationSample,
    CalibratorParams,
    FitError,
    RefitRecord,
    calibrate,
    fit_arrays,
)
from .dataset import Annotation, Dataset, dumps_dataset
from .geometry import BBox, iou


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    category: int
    confidence: float
    box: BBox

    def __post_init__(self):
        if not 0.0 < self.confidence < 1.0:
            raise ConfigError(f"detection confidence must lie in (0, 1), got {self.confidence}")


@dataclass(frozen=True)
class Label:
    """Training target: either a ground-truth annotation or a pseudo label."""

    category: int
    box: BBox
    pseudo: bool = False
    score: float | None = None


@dataclass(frozen=True)
class PipelineConfig:
    tau_minus: float = 0.6
    tau_plus: float = 0.75
    tau_s: float = 0.7
    raw_floor: float = 0.4
    refit_interval: int = 500
    queue_capacity: int = 8000

    def __post_init__(self):
        if not 0.0 < self.tau_minus < self.tau_plus < 1.0:
            raise ConfigError(f"need 0 < tau_minus < tau_plus < 1, got {self.tau_minus}, {self.tau_plus}")
        if not 0.0 < self.tau_s < 1.0:
            raise ConfigError(f"tau_s must lie in (0, 1), got {self.tau_s}")
        if not 0.0 <= self.raw_floor < 1.0:
            raise ConfigError(f"raw_floor must lie in [0, 1), got {self.raw_floor}")
        if self.refit_interval < 1:
            raise ConfigError(f"refit_interval must be positive, got {self.refit_interval}")
        if self.queue_capacity < 1:
            raise ConfigError(f"queue_capacity must be positive, got {self.queue_capacity}")


def queue_capacity_for(images: int, predictions_per_image: float) -> int:
    """Queue length expressed as the predictions of ``images`` images."""
    return max(1, int(round(images * predictions_per_image)))


@dataclass
class PipelineState:
    queue: CalibrationQueue
    params: CalibratorParams = field(default_factory=CalibratorParams.identity)
    iteration: int = 0
    refits: list[RefitRecord] = field(default_factory=list)
    fit_failures: int = 0

    @classmethod
    def fresh(cls, cfg: PipelineConfig) -> "PipelineState":
        return cls(queue=CalibrationQueue(cfg.queue_capacity))


def match_max_iou(det: Detection, gts: Sequence[Annotation]) -> float:
    """Largest IoU between ``det`` and any same-class ground-truth box."""
    best = 0.0
    for gt in gts:
        if gt.category == det.category:
            best = max(best, iou(det.box, gt.box))
    return best


def select(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    params: CalibratorParams,
    cfg: PipelineConfig,
) -> tuple[list[Label], list[CalibrationSample]]:
    """Labels for one image and the calibration samples its detections yield."""
    pseudo: list[Label] = []
    fresh: list[CalibrationSample] = []
    for det in dets:
        if det.confidence <= cfg.raw_floor:
            continue
        overlap = match_max_iou(det, gts)
        score = calibrate(det.confidence, params)
        if overlap < cfg.tau_minus and score > cfg.tau_s:
            pseudo.append(Label(det.category, det.box, pseudo=True, score=score))
        if overlap > cfg.tau_minus:
            fresh.append(CalibrationSample(det.confidence, 1 if overlap > cfg.tau_plus else 0))
    labels = [Label(gt.category, gt.box) for gt in gts]
    labels.extend(pseudo)
    return labels, fresh


def advance(state: PipelineState, samples: Sequence[CalibrationSample], cfg: PipelineConfig) -> PipelineState:
    """Enqueue samples, count one iteration, and refit on schedule."""
    for s in samples:
        state.queue.enqueue(s)
    state.iteration += 1
    if state.iteration % cfg.refit_interval == 0:
        refit(state)
    return state


def step(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    state: PipelineState,
    cfg: PipelineConfig,
) -> tuple[list[Label], PipelineState]:
    """Select pseudo labels for one image and advance the calibration state.

    All decisions are computed before ``state`` is touched, so an invalid
    input leaves the state exactly as it was.
    """
    labels, fresh = select(dets, gts, state.params, cfg)
    return labels, advance(state, fresh, cfg)


def step_batch(
    batch: Sequence[tuple[Sequence[Detection], Sequence[Annotation]]],
    state: PipelineState,
    cfg: PipelineConfig,
) -> tuple[list[list[Label]], PipelineState]:
    """One iteration over several images; the calibrator is the same for all of them."""
    out = [select(dets, gts, state.params, cfg) for dets, gts in batch]
    fresh = [s for _, samples in out for s in samples]
    return [labels for labels, _ in out], advance(state, fresh, cfg)


def refit(state: PipelineState) -> bool:
    """Refit the calibrator on the queue; keep the old params on failure."""
    if not state.queue.fittable():
        state.fit_failures += 1
        return False
    p, m = state.queue.arrays()
    try:
        params, mean_nll = fit_arrays(p, m)
    except FitError:
        state.fit_failures += 1
        return False
    state.params = params
    state.refits.append(RefitRecord(state.iteration, params.a, params.b, mean_nll, len(state.queue)))
    return True


@dataclass(frozen=True)
class ScheduleConfig:
    tau0: float
    e_minus: int
    e_plus: int

    def __post_init__(self):
        if not 0.0 < self.tau0 < 1.0:
            raise ConfigError(f"tau0 must lie in (0, 1), got {self.tau0}")
        if self.e_plus - self.e_minus < 2:
            raise ConfigError(f"need e_plus - e_minus >= 2, got {self.e_minus}, {self.e_plus}")


def dynamic_threshold(e: int, s: ScheduleConfig) -> float:
    """Score threshold at epoch ``e``, rising logarithmically from tau0 to 1."""
    if s.e_plus - s.e_minus < 2:
        raise ConfigError(f"need e_plus - e_minus >= 2, got {s.e_minus}, {s.e_plus}")
    if e > s.e_plus:
        raise ConfigError(f"epoch {e} past the end of the schedule ({s.e_plus})")
    if e <= s.e_minus:
        return s.tau0
    return s.tau0 + (1.0 - s.tau0) * math.log(e - s.e_minus) / math.log(s.e_plus - s.e_minus)


def step_fixed_threshold(
    dets: Sequence[Detection],
    gts: Sequence[Annotation],
    threshold: float,
    raw_floor: float = 0.4,
    tau_minus: float = 0.6,
) -> list[Label]:
    """Baseline selection on raw confidence, e.g. with a :func:`dynamic_threshold` value."""
    labels = [Label(gt.category, gt.box) for gt in gts]
    for det in dets:
        if det.confidence <= raw_floor:
            continue
        if match_max_iou(det, gts) < tau_minus and det.confidence > threshold:
            labels.append(Label(det.category, det.box, pseudo=True, score=det.confidence))
    return labels


def labels_to_annotations(labels: Sequence[Label], image_id: int, start_id: int) -> list[Annotation]:
    return [
        Annotation(
            id=start_id + i,
            image_id=image_id,
            category=lab.category,
            box=lab.box,
            pseudo=lab.pseudo,
            score=lab.score,
        )
        for i, lab in enumerate(labels)
    ]


def write_labels_json(per_image: dict[int, Sequence[Label]], dataset: Dataset, path: str | Path) -> None:
    """Write labels in the dataset JSON format, pseudo labels flagged with ``pseudo``/``score``."""
    anns: list[Annotation] = []
    for image_id in sorted(per_image):
        anns.extend(labels_to_annotations(per_image[image_id], image_id, len(anns) + 1))
    Path(path).write_text(dumps_dataset(dataset.with_annotations(anns)))
