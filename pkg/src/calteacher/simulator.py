"""Synthetic scenes, a miscalibrated detector, and a training-loop driver.

The simulated detector knows, for every box it emits, the probability ``q``
that the box is a correct match. Objects are either easy or hard; ``q`` is
drawn around the matching mode of ``q_modes`` and the per-class detector
quality is the share of easy objects. Correct boxes overlap their source object
above ``match_iou``; incorrect ones are mislocalised into ``miss_iou``. The
reported confidence is ``q`` pushed through a fixed logistic warp, so a
perfect calibrator is exactly the inverse warp. The true match outcome of
every emission is kept alongside the detection for checking calibration.

Detector quality per class plays the role of teacher weights: a "student"
quality vector drifts linearly each iteration and the teacher follows it by
exponential moving average.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .calibration import CalibratorParams, RefitRecord, calibrate_array, sigmoid
from .dataset import Annotation, Category, Dataset, Image, SplitSpec, sparsify, withheld
from .geometry import BBox, iou
from .metrics import ReliabilityReport, match_count, reliability
from .pseudo_labeling import Detection, PipelineConfig, PipelineState, step_batch

QUALITY_RANGE = (0.05, 0.98)
# max IoU between two placed objects; keeps boxes of different objects apart
PLACEMENT_IOU = 0.1
PLACEMENT_TRIES = 100
CONF_EPS = 1e-7


class SimConfigError(ValueError):
    pass


class GenerationError(RuntimeError):
    pass


class SimulationError(RuntimeError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass(frozen=True)
class SimConfig:
    n_images: int = 200
    objects_per_image: tuple[int, int] = (1, 8)
    n_classes: int = 5
    image_size: tuple[float, float] = (640.0, 480.0)
    box_fraction: tuple[float, float] = (0.08, 0.25)
    warp_a: float = 2.5
    warp_b: float = -1.0
    drift_rate: float = 0.0
    fp_rate: float = 0.1
    fp_q_max: float = 0.02
    jitter: float = 0.05
    match_iou: float = 0.75
    miss_iou: tuple[float, float] = (0.62, 0.73)
    initial_quality: float = 0.6
    q_modes: tuple[float, float] = (0.55, 0.8)
    concentration: float = 60.0
    detect_floor: float = 0.5
    ema_momentum: float = 0.99
    images_per_iteration: int = 4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "objects_per_image", tuple(self.objects_per_image))
        object.__setattr__(self, "image_size", tuple(float(v) for v in self.image_size))
        object.__setattr__(self, "box_fraction", tuple(self.box_fraction))
        object.__setattr__(self, "miss_iou", tuple(self.miss_iou))
        object.__setattr__(self, "q_modes", tuple(self.q_modes))
        lo, hi = self.objects_per_image
        checks = [
            (self.n_images >= 1, "n_images must be positive"),
            (1 <= lo <= hi, "objects_per_image must satisfy 1 <= lo <= hi"),
            (self.n_classes >= 1, "n_classes must be positive"),
            (all(v > 0 for v in self.image_size), "image_size must be positive"),
            (0 < self.box_fraction[0] <= self.box_fraction[1] <= 1, "box_fraction must satisfy 0 < lo <= hi <= 1"),
            (self.warp_a > 0 and math.isfinite(self.warp_b), "warp_a must be positive and warp_b finite"),
            (math.isfinite(self.drift_rate), "drift_rate must be finite"),
            (self.fp_rate >= 0, "fp_rate must be non-negative"),
            (0 < self.fp_q_max < 1, "fp_q_max must lie in (0, 1)"),
            (self.jitter >= 0, "jitter must be non-negative"),
            (0 < self.match_iou < 1, "match_iou must lie in (0, 1)"),
            (0 < self.miss_iou[0] <= self.miss_iou[1] < self.match_iou, "miss_iou must lie below match_iou"),
            (0 < self.initial_quality < 1, "initial_quality must lie in (0, 1)"),
            (0 < self.q_modes[0] <= self.q_modes[1] < 1, "q_modes must satisfy 0 < hard <= easy < 1"),
            (self.concentration > 0, "concentration must be positive"),
            (0 <= self.detect_floor <= 1, "detect_floor must lie in [0, 1]"),
            (0 <= self.ema_momentum <= 1, "ema_momentum must lie in [0, 1]"),
            (self.images_per_iteration >= 1, "images_per_iteration must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise SimConfigError(msg)


@dataclass(frozen=True)
class DetectorState:
    quality: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "quality", tuple(float(v) for v in self.quality))
        if not all(math.isfinite(v) and 0.0 <= v <= 1.0 for v in self.quality):
            raise SimConfigError(f"quality values must lie in [0, 1]: {self.quality}")

    @classmethod
    def uniform(cls, n_classes: int, value: float) -> "DetectorState":
        return cls((value,) * n_classes)


@dataclass(frozen=True)
class Emission:
    """A detection plus its hidden ground truth."""

    detection: Detection
    q: float
    m: int
    source: int  # annotation id, -1 for a false positive
    true_iou: float


def warp(q, a: float, b: float):
    """Raw detector confidence for true match probability ``q``."""
    q = np.clip(np.asarray(q, dtype=float), CONF_EPS, 1 - CONF_EPS)
    z = a * (np.log(q) - np.log1p(-q)) + b
    return np.clip(sigmoid(z), CONF_EPS, 1 - CONF_EPS)


def _seq_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


def generate_scenes(cfg: SimConfig) -> Dataset:
    """Fully annotated synthetic images; objects are placed almost disjoint."""
    rng = _seq_rng(cfg.seed, 1)
    W, H = cfg.image_size
    lo_f, hi_f = cfg.box_fraction
    lo_n, hi_n = cfg.objects_per_image
    images = [Image(i + 1, W, H) for i in range(cfg.n_images)]
    categories = [Category(c + 1, f"class_{c + 1}") for c in range(cfg.n_classes)]
    annotations: list[Annotation] = []
    for img in images:
        n = int(rng.integers(lo_n, hi_n + 1))
        placed: list[BBox] = []
        for _ in range(n):
            cat = int(rng.integers(cfg.n_classes)) + 1
            for _try in range(PLACEMENT_TRIES):
                w = W * rng.uniform(lo_f, hi_f)
                h = H * rng.uniform(lo_f, hi_f)
                x = rng.uniform(0.0, W - w)
                y = rng.uniform(0.0, H - h)
                box = BBox(x, y, x + w, y + h)
                if all(iou(box, other) <= PLACEMENT_IOU for other in placed):
                    break
            else:
                raise GenerationError(f"cannot place {n} objects in image {img.id}")
            placed.append(box)
            annotations.append(Annotation(len(annotations) + 1, img.id, cat, box))
    return Dataset(tuple(images), tuple(categories), tuple(annotations))


def box_with_iou(box: BBox, target: float, mode: int, sign: float) -> BBox:
    """A box whose IoU with ``box`` is ``target`` (0 < target <= 1).

    mode 0/1 shifts along x/y, 2 grows and 3 shrinks about the centre.
    """
    if target >= 1.0:
        return box
    w, h = box.width, box.height
    if mode == 0:
        return box.translate(sign * w * (1 - target) / (1 + target), 0.0)
    if mode == 1:
        return box.translate(0.0, sign * h * (1 - target) / (1 + target))
    s = 1.0 / math.sqrt(target) if mode == 2 else math.sqrt(target)
    cx, cy = (box.x1 + box.x2) / 2, (box.y1 + box.y2) / 2
    return BBox(cx - s * w / 2, cy - s * h / 2, cx + s * w / 2, cy + s * h / 2)


def simulate_detector(
    gts: Sequence[Annotation],
    state: DetectorState,
    cfg: SimConfig,
    rng: np.random.Generator,
) -> list[Emission]:
    """Detections for one image with their hidden match outcomes."""
    return simulate_batch([gts], state, cfg, rng)[0]


def simulate_batch(
    images: Sequence[Sequence[Annotation]],
    state: DetectorState,
    cfg: SimConfig,
    rng: np.random.Generator,
) -> list[list[Emission]]:
    """:func:`simulate_detector` for several images, drawing all randomness at once."""
    W, H = cfg.image_size
    gts = [gt for img in images for gt in img]
    n = len(gts)
    qual = np.array([state.quality[gt.category - 1] for gt in gts], dtype=float)
    # every draw is made for every object so the stream layout is fixed
    detected = rng.random(n) < cfg.detect_floor + (1 - cfg.detect_floor) * qual
    mode_q = np.where(rng.random(n) < qual, cfg.q_modes[1], cfg.q_modes[0])
    q = np.clip(rng.beta(cfg.concentration * mode_q, cfg.concentration * (1 - mode_q)), 1e-4, 1 - 1e-4)
    hit = rng.random(n) < q
    slack = 0.95 * (1.0 - cfg.match_iou)
    target = np.where(
        hit,
        1.0 - np.minimum(np.abs(cfg.jitter * rng.standard_normal(n)), slack),
        rng.uniform(cfg.miss_iou[0], cfg.miss_iou[1], n),
    )
    how = rng.integers(4, size=n)
    sign = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    conf = warp(q, cfg.warp_a, cfg.warp_b).tolist()
    q = q.tolist()

    n_fp = rng.poisson(cfg.fp_rate, size=len(images))
    total_fp = int(n_fp.sum())
    lo_f, hi_f = cfg.box_fraction
    w = W * rng.uniform(lo_f, hi_f, total_fp)
    h = H * rng.uniform(lo_f, hi_f, total_fp)
    x = (rng.uniform(0.0, 1.0, total_fp) * (W - w)).tolist()
    y = (rng.uniform(0.0, 1.0, total_fp) * (H - h)).tolist()
    w, h = w.tolist(), h.tolist()
    cats = (rng.integers(cfg.n_classes, size=total_fp) + 1).tolist()
    q_fp = rng.uniform(1e-4, cfg.fp_q_max, total_fp)
    conf_fp = warp(q_fp, cfg.warp_a, cfg.warp_b).tolist()
    q_fp = q_fp.tolist()

    out: list[list[Emission]] = []
    i = j = 0
    for img, k_fp in zip(images, n_fp.tolist()):
        em: list[Emission] = []
        for gt in img:
            if detected[i]:
                box = box_with_iou(gt.box, float(target[i]), int(how[i]), float(sign[i]))
                overlap = iou(box, gt.box)
                det = Detection(gt.category, conf[i], box)
                em.append(Emission(det, q[i], int(overlap > cfg.match_iou), gt.id, overlap))
            i += 1
        for _ in range(k_fp):
            box = BBox(x[j], y[j], x[j] + w[j], y[j] + h[j])
            em.append(Emission(Detection(cats[j], conf_fp[j], box), q_fp[j], 0, -1, 0.0))
            j += 1
        out.append(em)
    return out


def ema_update(teacher: DetectorState, student: DetectorState, momentum: float) -> DetectorState:
    if len(teacher.quality) != len(student.quality):
        raise SimConfigError("teacher and student quality vectors differ in length")
    if not 0.0 <= momentum <= 1.0:
        raise SimConfigError(f"momentum must lie in [0, 1], got {momentum}")
    return DetectorState(
        tuple(momentum * t + (1.0 - momentum) * s for t, s in zip(teacher.quality, student.quality))
    )


def drift(state: DetectorState, rate: float) -> DetectorState:
    lo, hi = QUALITY_RANGE
    return DetectorState(tuple(min(max(v + rate, lo), hi) for v in state.quality))


@dataclass(frozen=True)
class Checkpoint:
    checkpoint: int
    iteration: int
    ece_raw: float
    ece_cal: float
    a: float
    b: float
    queue_size: int
    pseudo_precision: float
    pseudo_recall: float
    refits: int


RUN_CSV_HEADER = [
    "checkpoint", "iteration", "ece_raw", "ece_cal", "a", "b",
    "queue_size", "pseudo_precision", "pseudo_recall",
]


@dataclass
class RunReport:
    sim: SimConfig
    pipeline: PipelineConfig
    n_iterations: int
    initial_params: CalibratorParams = field(default_factory=CalibratorParams.identity)
    checkpoints: list[Checkpoint] = field(default_factory=list)
    refits: list[RefitRecord] = field(default_factory=list)
    reliability: list[tuple[ReliabilityReport, ReliabilityReport]] = field(default_factory=list)
    # trailing ECE window at the end of the run: raw confidence, match outcome
    final_window: tuple[np.ndarray, np.ndarray] = (np.empty(0), np.empty(0))
    final_params: CalibratorParams = field(default_factory=CalibratorParams.identity)

    @property
    def queue_capacity(self) -> int:
        return self.pipeline.queue_capacity

    def config_dict(self) -> dict:
        return {"sim": asdict(self.sim), "pipeline": asdict(self.pipeline)}

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(RUN_CSV_HEADER)
            for c in self.checkpoints:
                w.writerow([
                    c.checkpoint, c.iteration, repr(c.ece_raw), repr(c.ece_cal), repr(c.a), repr(c.b),
                    c.queue_size, repr(c.pseudo_precision), repr(c.pseudo_recall),
                ])


def run_training_loop(
    sim: SimConfig,
    pipe: PipelineConfig,
    n_iterations: int,
    checkpoint_every: int = 500,
    *,
    split: SplitSpec | None = None,
    ece_window: int = 10000,
    n_bins: int = 15,
    pr_iou: float | None = None,
    keep_reliability: bool = False,
) -> RunReport:
    """Drive the pseudo-labeling pipeline over simulated teacher predictions.

    Each iteration samples ``sim.images_per_iteration`` images, simulates
    teacher detections on their full ground truth, and runs one pipeline
    iteration against the sparse annotations.
    Checkpoints report ECE over the trailing ``ece_window`` emissions (raw
    scores and current-calibrator scores) and pseudo-label precision/recall
    against the deleted annotations since the previous checkpoint, matched
    at ``pr_iou`` (defaults to ``pipe.tau_plus``).
    """
    if n_iterations < 0 or checkpoint_every < 1 or ece_window < 1:
        raise SimConfigError("n_iterations >= 0, checkpoint_every >= 1 and ece_window >= 1 required")
    split = split or SplitSpec("per-class", 50, sim.seed)
    pr_iou = pipe.tau_plus if pr_iou is None else pr_iou

    full = generate_scenes(sim)
    sparse, _ = sparsify(full, split)
    full_by = full.by_image()
    sparse_by = sparse.by_image()
    held_by = {img.id: [] for img in full.images}
    for a in withheld(full, sparse):
        held_by[a.image_id].append(a)

    report = RunReport(sim, pipe, n_iterations)
    state = PipelineState.fresh(pipe)
    teacher = DetectorState.uniform(sim.n_classes, sim.initial_quality)
    student = teacher
    pick = _seq_rng(sim.seed, 3)
    window: deque[tuple[float, int]] = deque(maxlen=ece_window)
    n_pseudo = n_held = n_match = 0

    for t in range(1, n_iterations + 1):
        try:
            imgs = [full.images[int(i)] for i in pick.integers(len(full.images), size=sim.images_per_iteration)]
            det_rng = _seq_rng(sim.seed, 2, t)
            emitted = simulate_batch([full_by[img.id] for img in imgs], teacher, sim, det_rng)
            batch = [([e.detection for e in em], sparse_by[img.id]) for img, em in zip(imgs, emitted)]
            labels_per_image, state = step_batch(batch, state, pipe)
        except Exception as e:
            raise SimulationError(t, e) from e
        for img, em, labels in zip(imgs, emitted, labels_per_image):
            window.extend((e.detection.confidence, e.m) for e in em)
            pseudo = [lab for lab in labels if lab.pseudo]
            held = held_by[img.id]
            n_pseudo += len(pseudo)
            n_held += len(held)
            n_match += match_count(pseudo, held, pr_iou)

        student = drift(student, sim.drift_rate)
        teacher = ema_update(teacher, student, sim.ema_momentum)

        if t % checkpoint_every == 0:
            p_raw = np.fromiter((w[0] for w in window), dtype=float, count=len(window))
            m = np.fromiter((w[1] for w in window), dtype=float, count=len(window))
            if p_raw.size:
                rel_raw = reliability(p_raw, m, n_bins)
                rel_cal = reliability(calibrate_array(p_raw, state.params), m, n_bins)
                ece_raw, ece_cal = rel_raw.ece, rel_cal.ece
            else:
                rel_raw = rel_cal = None
                ece_raw = ece_cal = float("nan")
            report.checkpoints.append(Checkpoint(
                checkpoint=len(report.checkpoints) + 1,
                iteration=t,
                ece_raw=ece_raw,
                ece_cal=ece_cal,
                a=state.params.a,
                b=state.params.b,
                queue_size=len(state.queue),
                pseudo_precision=n_match / n_pseudo if n_pseudo else 1.0,
                pseudo_recall=n_match / n_held if n_held else 1.0,
                refits=len(state.refits),
            ))
            if keep_reliability and rel_raw is not None:
                report.reliability.append((rel_raw, rel_cal))
            n_pseudo = n_held = n_match = 0

    report.refits = list(state.refits)
    report.final_params = state.params
    report.final_window = (
        np.fromiter((w[0] for w in window), dtype=float, count=len(window)),
        np.fromiter((w[1] for w in window), dtype=float, count=len(window)),
    )
    return report
