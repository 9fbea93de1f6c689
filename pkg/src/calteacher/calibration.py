"""Platt-scaling calibrator on the logit of the raw confidence, fitted online.

The calibrator maps a raw confidence ``p`` to ``sigmoid(a * logit(p) + b)``.
``(a, b) = (1, 0)`` is the identity, which is where a fresh pipeline starts.
Parameters are refitted by minimising the Bernoulli negative log-likelihood
of a FIFO queue of ``(p, m)`` pairs, where ``m`` says whether the prediction
matched a ground-truth box.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EPS = 1e-7
MAX_ITER = 200
GRAD_TOL = 1e-8


class CalibrationError(ValueError):
    pass


class FitError(RuntimeError):
    pass


@dataclass(frozen=True)
class CalibratorParams:
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        if not (math.isfinite(self.a) and math.isfinite(self.b)):
            raise CalibrationError(f"non-finite calibrator params ({self.a}, {self.b})")

    @classmethod
    def identity(cls) -> "CalibratorParams":
        return cls(1.0, 0.0)


@dataclass(frozen=True)
class CalibrationSample:
    p_hat: float
    m: int

    def __post_init__(self):
        if not 0.0 < self.p_hat < 1.0:
            raise CalibrationError(f"confidence must lie in (0, 1), got {self.p_hat}")
        if self.m not in (0, 1):
            raise CalibrationError(f"match indicator must be 0 or 1, got {self.m}")


def clamp_confidence(p):
    return np.clip(p, EPS, 1.0 - EPS)


def logit(p):
    p = np.asarray(p, dtype=float)
    return np.log(p) - np.log1p(-p)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def calibrate(p_hat: float, params: CalibratorParams) -> float:
    """Calibrated score for a single raw confidence in the open unit interval."""
    if not 0.0 < p_hat < 1.0:
        raise CalibrationError(f"confidence must lie in (0, 1), got {p_hat}")
    z = params.a * (math.log(p_hat) - math.log1p(-p_hat)) + params.b
    return _sigmoid(z)


def calibrate_array(p_hat, params: CalibratorParams) -> np.ndarray:
    """Vectorised :func:`calibrate`; inputs are clamped to ``[EPS, 1 - EPS]``."""
    z = params.a * logit(clamp_confidence(np.asarray(p_hat, dtype=float))) + params.b
    return sigmoid(z)


def sigmoid(z) -> np.ndarray:
    # exp of a non-positive argument only, so tiny outputs keep full precision
    z = np.asarray(z, dtype=float)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def nll(params: CalibratorParams | Sequence[float], x: np.ndarray, m: np.ndarray) -> float:
    """Summed negative log-likelihood; ``x`` is already in the logit domain."""
    a, b = (params.a, params.b) if isinstance(params, CalibratorParams) else params
    z = a * x + b
    return float(np.sum(np.logaddexp(0.0, z) - m * z))


def nll_grad(params: CalibratorParams | Sequence[float], x: np.ndarray, m: np.ndarray) -> np.ndarray:
    a, b = (params.a, params.b) if isinstance(params, CalibratorParams) else params
    r = sigmoid(a * x + b) - m
    return np.array([np.dot(r, x), r.sum()])


def _hessian(a: float, b: float, x: np.ndarray) -> np.ndarray:
    q = sigmoid(a * x + b)
    w = q * (1.0 - q)
    sxx = float(np.dot(w, x * x))
    sx = float(np.dot(w, x))
    return np.array([[sxx, sx], [sx, float(w.sum())]])


def fit_arrays(p_hat, m, init: CalibratorParams | None = None) -> tuple[CalibratorParams, float]:
    """Fit ``(a, b)`` by damped Newton-Raphson; returns params and mean NLL.

    Raises :class:`FitError` on a single-class sample set, on non-convergence,
    and when the optimum is not monotone increasing (``a <= 0``).
    """
    p_hat = np.asarray(p_hat, dtype=float)
    m = np.asarray(m, dtype=float)
    n_pos = int(m.sum())
    n_neg = len(m) - n_pos
    if n_pos < 2 or n_neg < 2:
        raise FitError(f"degenerate queue: {n_pos} positive / {n_neg} negative samples")
    x = logit(clamp_confidence(p_hat))
    n = len(x)

    theta = np.array([1.0, 0.0]) if init is None else np.array([init.a, init.b])
    f = nll(theta, x, m)
    for it in range(1, MAX_ITER + 1):
        g = nll_grad(theta, x, m)
        if np.max(np.abs(g)) / n < GRAD_TOL:
            break
        h = _hessian(theta[0], theta[1], x)
        try:
            step = np.linalg.solve(h + 1e-12 * np.eye(2), g)
        except np.linalg.LinAlgError:
            step = g / max(np.trace(h), 1e-12)
        t = 1.0
        while True:
            cand = theta - t * step
            fc = nll(cand, x, m)
            if math.isfinite(fc) and fc <= f + 1e-12 * max(1.0, abs(f)):
                break
            t *= 0.5
            if t < 1e-10:
                raise FitError(f"line search stalled after {it} iterations")
        theta, f = cand, fc
    else:
        raise FitError(f"did not converge after {MAX_ITER} iterations")

    if theta[0] <= 0.0:
        raise FitError(f"non-monotone calibrator (a = {theta[0]:.4g})")
    return CalibratorParams(float(theta[0]), float(theta[1])), f / n


class CalibrationQueue:
    """Fixed-capacity FIFO of calibration samples; the oldest entry leaves first."""

    def __init__(self, capacity: int, samples: Iterable[CalibrationSample] = ()):
        if capacity < 1:
            raise CalibrationError(f"queue capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._entries: deque[tuple[float, int]] = deque(maxlen=capacity)
        for s in samples:
            self.enqueue(s)

    def enqueue(self, sample: CalibrationSample) -> "CalibrationQueue":
        self._entries.append((sample.p_hat, sample.m))
        return self

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return (CalibrationSample(p, m) for p, m in self._entries)

    def samples(self) -> list[CalibrationSample]:
        return list(self)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        n = len(self._entries)
        p = np.fromiter((e[0] for e in self._entries), dtype=float, count=n)
        m = np.fromiter((e[1] for e in self._entries), dtype=float, count=n)
        return p, m

    def class_counts(self) -> tuple[int, int]:
        pos = sum(e[1] for e in self._entries)
        return len(self._entries) - pos, pos

    def fittable(self) -> bool:
        neg, pos = self.class_counts()
        return neg >= 2 and pos >= 2


def enqueue(queue: CalibrationQueue, sample: CalibrationSample) -> CalibrationQueue:
    return queue.enqueue(sample)


def fit(queue: CalibrationQueue) -> CalibratorParams:
    p, m = queue.arrays()
    return fit_arrays(p, m)[0]


@dataclass(frozen=True)
class RefitRecord:
    iteration: int
    a: float
    b: float
    nll: float
    queue_size: int


def write_trajectory_csv(records: Sequence[RefitRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "a", "b", "nll", "queue_size"])
        for r in records:
            w.writerow([r.iteration, repr(r.a), repr(r.b), repr(r.nll), r.queue_size])
