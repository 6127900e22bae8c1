"""Attack-quality metrics: FR, ANI, AAP, ASP, l2,1 distance, transferability."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

UNDEFINED = "-"


def l21_distance(delta) -> float:
    """Mean over frames of the per-frame Euclidean norm, normalized by sqrt(pixels per frame)."""
    d = np.asarray(delta, dtype=np.float64)
    T = d.shape[0]
    per_frame = d.reshape(T, -1)
    return float(np.linalg.norm(per_frame, axis=1).sum() / (T * math.sqrt(per_frame.shape[1])))


def _successes(results):
    return [r for r in results if r.success]


def fooling_rate(results: Sequence) -> float:
    if not results:
        raise ValueError("fooling_rate: no results")
    return sum(1 for r in results if r.success) / len(results)


def ani(results: Sequence) -> float | None:
    """Mean iterations over successful attacks; ``None`` when nothing succeeded."""
    wins = _successes(results)
    if not wins:
        return None
    return sum(r.iterations for r in wins) / len(wins)


def asp(results: Sequence) -> float | None:
    """Mean SSIM distance (1 - SSIM) over successful attacks."""
    wins = _successes(results)
    if not wins:
        return None
    return sum(r.ssim_distance for r in wins) / len(wins)


def aap_formula(f: float, mean_distance: float | None, d_max: float) -> float:
    if f > 0 and mean_distance is None:
        raise ValueError("aap: positive fooling rate without any successful distance")
    return (mean_distance or 0.0) * f + d_max * (1 - f)


@dataclass(frozen=True)
class MetricsInput:
    results: Sequence
    d_max: float
    distance_kind: str = "ssim_distance"

    def __post_init__(self):
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        if self.distance_kind not in ("ssim_distance", "l21", "l21_distance"):
            raise ValueError(f"unknown distance kind {self.distance_kind!r}")


def aap(inp: MetricsInput) -> float:
    """Mean success distance weighted by FR, with failures charged at ``d_max``."""
    f = fooling_rate(inp.results)
    attr = "ssim_distance" if inp.distance_kind == "ssim_distance" else "l21_distance"
    wins = _successes(inp.results)
    mean = sum(getattr(r, attr) for r in wins) / len(wins) if wins else None
    return aap_formula(f, mean, inp.d_max)


def fmt(value: float | None, digits: int = 6) -> str:
    """Render a metric, printing undefined values as ``-``."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return UNDEFINED
    return f"{value:.{digits}f}"


def normal_ci99(values: Sequence[float]) -> tuple[float, float]:
    """Mean and half-width of a 99% normal-approximation interval."""
    arr = np.asarray(values, dtype=np.float64)
    mean = float(arr.mean())
    if arr.size < 2:
        return mean, 0.0
    return mean, float(2.5758293035489004 * arr.std(ddof=1) / math.sqrt(arr.size))


@dataclass
class TransferMatrix:
    names: list[str]
    values: list[list[float | None]]  # rows are source models; None marks an undefined row
    counts: list[int]  # white-box successes per source model

    def to_csv(self) -> str:
        lines = ["source," + ",".join(self.names) + ",successes"]
        for name, row, n in zip(self.names, self.values, self.counts):
            lines.append(",".join([name] + [fmt(v, 4) for v in row] + [str(n)]))
        return "\n".join(lines) + "\n"


def transfer_from_predictions(names: Sequence[str], labels: Sequence[Sequence[int]],
                              preds: Sequence[Sequence[Sequence[int]]]) -> TransferMatrix:
    """Fold cross-model predictions into a transfer matrix.

    ``labels[i]`` are the true labels of model i's successful adversarial
    videos and ``preds[i][j]`` the predictions of model j on them.
    """
    values, counts = [], []
    for i in range(len(names)):
        n = len(labels[i])
        counts.append(n)
        if n == 0:
            values.append([None] * len(names))
            continue
        y = np.asarray(labels[i])
        values.append([1.0 if j == i else float(np.mean(np.asarray(preds[i][j]) != y))
                       for j in range(len(names))])
    return TransferMatrix(list(names), values, counts)
