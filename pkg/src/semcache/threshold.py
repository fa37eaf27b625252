"""F-beta optimal similarity threshold from labeled, scored pairs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInput, InsufficientLabels
from .evaluation import ConfusionCounts, MetricsReport, compute_metrics

DEFAULT_BETA = 0.5
DEFAULT_GRID_STEP = 0.01
DEFAULT_TAU = 0.83


@dataclass(frozen=True)
class ThresholdProfile:
    tau: float = DEFAULT_TAU
    beta: float = DEFAULT_BETA
    f_beta_at_tau: float = 0.0
    grid_step: float = DEFAULT_GRID_STEP

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.beta <= 0 or self.grid_step <= 0:
            raise ValueError("beta and grid_step must be positive")


def grid(step: float = DEFAULT_GRID_STEP) -> np.ndarray:
    """Threshold grid {0, step, ..., 1}, each point rounded to kill float drift."""
    n = int(round(1.0 / step))
    return np.array([round(i * step, 10) for i in range(n + 1)])


def snap(tau: float, step: float = DEFAULT_GRID_STEP) -> float:
    return round(round(tau / step) * step, 10)


def _split(scored_pairs) -> tuple[np.ndarray, np.ndarray]:
    if len(scored_pairs) == 0:
        raise EmptyInput("no scored pairs")
    sims = np.array([float(s) for s, _ in scored_pairs], dtype=np.float64)
    dups = np.array([bool(d) for _, d in scored_pairs], dtype=bool)
    return sims, dups


def evaluate_at(scored_pairs: Sequence[tuple[float, bool]], tau: float, beta: float = DEFAULT_BETA):
    """Confusion counts and metrics when predicting duplicate iff ``sim >= tau``."""
    sims, dups = _split(scored_pairs)
    pred = sims >= tau
    counts = ConfusionCounts(
        true_hit=int(np.sum(pred & dups)),
        false_hit=int(np.sum(pred & ~dups)),
        true_miss=int(np.sum(~pred & ~dups)),
        false_miss=int(np.sum(~pred & dups)),
    )
    return counts, compute_metrics(counts, beta)


def sweep(scored_pairs, beta: float = DEFAULT_BETA, grid_step: float = DEFAULT_GRID_STEP):
    """Metrics at every grid threshold, as ``(taus, [MetricsReport, ...])``.

    Counts at all thresholds come from one sort plus binary searches.
    """
    sims, dups = _split(scored_pairs)
    taus = grid(grid_step)
    dup_sorted = np.sort(sims[dups])
    non_sorted = np.sort(sims[~dups])
    # number of scores strictly below each tau
    dup_below = np.searchsorted(dup_sorted, taus, side="left")
    non_below = np.searchsorted(non_sorted, taus, side="left")
    reports: list[MetricsReport] = []
    for db, nb in zip(dup_below, non_below):
        counts = ConfusionCounts(
            true_hit=int(len(dup_sorted) - db),
            false_hit=int(len(non_sorted) - nb),
            true_miss=int(nb),
            false_miss=int(db),
        )
        reports.append(compute_metrics(counts, beta))
    return taus, reports


def tune(
    scored_pairs: Sequence[tuple[float, bool]],
    beta: float = DEFAULT_BETA,
    grid_step: float = DEFAULT_GRID_STEP,
) -> ThresholdProfile:
    """Grid threshold maximizing F-beta; ties go to the largest threshold."""
    _, dups = _split(scored_pairs)
    if dups.all() or not dups.any():
        raise InsufficientLabels("tuning needs both duplicate and non-duplicate pairs")
    taus, reports = sweep(scored_pairs, beta, grid_step)
    best = 0
    for i, rep in enumerate(reports):
        if rep.f_beta >= reports[best].f_beta:
            best = i
    f_best = reports[best].f_beta
    assert all(r.f_beta <= f_best for r in reports)
    return ThresholdProfile(float(taus[best]), beta, f_best, grid_step)


def load_scored_csv(path: str | Path) -> list[tuple[float, bool]]:
    """Read ``similarity,duplicate`` rows; a header row is skipped if present."""
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.reader(fh):
            if not row or not row[0].strip():
                continue
            try:
                sim = float(row[0])
            except ValueError:
                if not out:
                    continue  # header
                raise
            flag = row[1].strip().lower()
            out.append((sim, flag in ("1", "true", "yes", "dup", "duplicate")))
    return out
