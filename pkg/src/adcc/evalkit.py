"""Angular error, summary statistics and learning-free baselines."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .imaging import CANONICAL, Illuminant, LinearImage


class MetricError(ValueError):
    pass


def _vec(x) -> np.ndarray:
    return np.asarray(x.rgb if isinstance(x, Illuminant) else x, dtype=np.float64).reshape(-1)


def angular_error(light, estimate) -> float:
    """Angle in degrees between two RGB vectors (neither needs unit norm)."""
    a, b = _vec(light), _vec(estimate)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError("angular error undefined for a zero vector")
    cos = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return math.degrees(math.acos(cos))


def angular_errors(lights: np.ndarray, estimates: np.ndarray) -> np.ndarray:
    a = np.asarray(lights, dtype=np.float64)
    b = np.asarray(estimates, dtype=np.float64)
    cos = np.sum(a * b, axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
    return np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))


@dataclass(frozen=True)
class ErrorSummary:
    mean: float
    median: float
    trimean: float
    best25_mean: float
    worst25_mean: float
    q95: float
    n: int

    COLUMNS = ("mean", "median", "trimean", "best25", "worst25", "q95")

    def as_row(self) -> tuple:
        return (self.mean, self.median, self.trimean, self.best25_mean, self.worst25_mean, self.q95)

    def format(self) -> str:
        head = "  ".join(f"{c:>8s}" for c in self.COLUMNS)
        vals = "  ".join(f"{v:8.2f}" for v in self.as_row())
        return f"{head}\n{vals}\n(n = {self.n})"


def summarize(errors) -> ErrorSummary:
    e = np.sort(np.asarray(errors, dtype=np.float64).reshape(-1))
    if e.size == 0:
        raise MetricError("cannot summarise an empty error list")
    q1, q2, q3, q95 = np.percentile(e, [25, 50, 75, 95])
    k = math.ceil(e.size / 4)
    return ErrorSummary(
        mean=float(e.mean()),
        median=float(q2),
        trimean=float((q1 + 2 * q2 + q3) / 4),
        best25_mean=float(e[:k].mean()),
        worst25_mean=float(e[-k:].mean()),
        q95=float(q95),
        n=int(e.size),
    )


def write_errors_csv(path, ids, errors) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "error_deg"])
        for i, e in zip(ids, errors):
            w.writerow([i, f"{e:.6f}"])


def gray_world(img: LinearImage) -> Illuminant:
    px = img.pixels[img.valid]
    if px.size == 0:
        return CANONICAL
    m = px.mean(axis=0)
    if np.any(m <= 0):
        return CANONICAL
    return Illuminant(m / np.linalg.norm(m))


def white_patch(img: LinearImage) -> Illuminant:
    px = img.pixels[img.valid]
    if px.size == 0:
        return CANONICAL
    m = px.max(axis=0)
    if np.any(m <= 0):
        return CANONICAL
    return Illuminant(m / np.linalg.norm(m))
