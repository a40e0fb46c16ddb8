"""Correlation-based attention decisions, accuracies and binomial significance."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional

import numpy as np
from scipy.special import gammaln

from .decoder import AttentionLabels, _vector
from .errors import ConfigError, NoWindowsError, ShapeError, ZeroVarianceError

log = logging.getLogger(__name__)

__all__ = [
    "DecisionWindowConfig",
    "DecisionRecord",
    "WindowedDecisions",
    "pearson",
    "decide_window",
    "windowed_decisions",
    "binomial_quantile",
    "significance_threshold",
    "chance_band",
    "DECISION_CSV_FIELDS",
    "write_decisions_csv",
]


@dataclass(frozen=True)
class DecisionWindowConfig:
    window_len_s: float
    overlap: float = 0.0
    drop_partial: bool = True

    def n_samples(self, fs: float) -> int:
        n = int(round(self.window_len_s * fs))
        if self.window_len_s <= 0 or n < 2:
            raise ConfigError(
                f"a {self.window_len_s} s window at {fs} Hz has fewer than 2 samples")
        if not 0.0 <= self.overlap < 1.0:
            raise ConfigError(f"overlap must lie in [0, 1), got {self.overlap}")
        return n


@dataclass(frozen=True)
class DecisionRecord:
    window_index: int
    rho1: float
    rho2: float
    decided: int
    truth: int
    tie: bool = False
    start: int = 0
    stop: int = 0

    @property
    def correct(self) -> bool:
        return self.decided == self.truth


@dataclass
class WindowedDecisions:
    records: List[DecisionRecord] = field(default_factory=list)
    n_undecidable: int = 0

    @property
    def n_decisions(self) -> int:
        return len(self.records)

    @property
    def n_correct(self) -> int:
        return sum(r.correct for r in self.records)

    @property
    def accuracy(self) -> float:
        if not self.records:
            return float("nan")
        return self.n_correct / self.n_decisions


def pearson(a, b) -> float:
    """Sample Pearson correlation of two equal-length vectors."""
    x, y = _vector(a), _vector(b)
    if x.size != y.size:
        raise ShapeError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ShapeError("correlation needs at least 2 samples")
    x = x - x.mean()
    y = y - y.mean()
    sxx, syy = x @ x, y @ y
    if sxx == 0 or syy == 0:
        raise ZeroVarianceError("correlation of a constant vector is undefined")
    rho = (x @ y) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, rho)))


def decide_window(s_hat, s1, s2, truth: int = 1, window_index: int = 0,
                  start: int = 0) -> DecisionRecord:
    """Pick the speaker whose envelope correlates best with the reconstruction.

    Exact ties go to speaker 1 and are flagged.
    """
    r1, r2 = pearson(s_hat, s1), pearson(s_hat, s2)
    decided = 1 if r1 >= r2 else 2
    n = _vector(s_hat).size
    return DecisionRecord(window_index, r1, r2, decided, int(truth), tie=(r1 == r2),
                          start=start, stop=start + n)


def _window_bounds(start: int, stop: int, n: int, step: int, drop_partial: bool):
    out = []
    a = start
    while a + n <= stop:
        out.append((a, a + n))
        a += step
    if not drop_partial and a < stop and stop - a >= 2:
        out.append((a, stop))
    return out


def windowed_decisions(s_hat, s1, s2, labels: AttentionLabels, cfg: DecisionWindowConfig,
                       fs: float) -> WindowedDecisions:
    """Decisions over consecutive windows, never straddling an attention switch."""
    x, a, b = _vector(s_hat), _vector(s1), _vector(s2)
    if not (x.size == a.size == b.size == len(labels)):
        raise ShapeError(
            f"length mismatch: s_hat {x.size}, s1 {a.size}, s2 {b.size}, labels {len(labels)}")
    n = cfg.n_samples(fs)
    step = max(1, int(round(n * (1.0 - cfg.overlap))))
    out = WindowedDecisions()
    k = 0
    for seg_start, seg_stop, truth in labels.segments():
        for lo, hi in _window_bounds(seg_start, seg_stop, n, step, cfg.drop_partial):
            try:
                out.records.append(decide_window(x[lo:hi], a[lo:hi], b[lo:hi], truth, k, lo))
            except ZeroVarianceError:
                out.n_undecidable += 1
            k += 1
    if k == 0:
        raise NoWindowsError(f"no complete {cfg.window_len_s} s window fits the trial")
    if out.n_undecidable:
        log.warning("%d undecidable window(s) excluded from accuracy", out.n_undecidable)
    return out


def _binomial_log_cdf(n: int, p: float = 0.5) -> np.ndarray:
    k = np.arange(n + 1)
    logpmf = (gammaln(n + 1) - gammaln(k + 1) - gammaln(n - k + 1)
              + k * np.log(p) + (n - k) * np.log1p(-p))
    return np.logaddexp.accumulate(logpmf)


def binomial_quantile(q: float, n: int, p: float = 0.5) -> int:
    """Smallest ``k`` with ``P(X <= k) >= q`` for ``X ~ Binomial(n, p)``."""
    logcdf = _binomial_log_cdf(n, p)
    # the cumulative sum can only undershoot 1 by rounding; treat the tail as exact
    logcdf[-1] = 0.0
    return int(np.argmax(logcdf >= np.log(q)))


def significance_threshold(n_decisions: int, alpha: float = 0.05) -> float:
    """Accuracy needed to beat chance (p = 0.5) at level ``alpha`` over ``n`` decisions."""
    if int(n_decisions) != n_decisions or n_decisions < 1:
        raise ConfigError(f"number of decisions must be a positive integer, got {n_decisions}")
    if not 0 < alpha < 1:
        raise ConfigError(f"alpha must lie in (0, 1), got {alpha}")
    n = int(n_decisions)
    return binomial_quantile(1.0 - alpha, n) / n


def chance_band(n_decisions: int, level: float = 0.99):
    """Two-sided central ``level`` interval of the accuracy of a fair coin."""
    tail = (1.0 - level) / 2
    n = int(n_decisions)
    return binomial_quantile(tail, n) / n, binomial_quantile(1.0 - tail, n) / n


DECISION_CSV_FIELDS = ["subject", "condition", "trial", "fold", "window_index",
                       "window_len_s", "rho1", "rho2", "decided", "truth", "correct", "tie"]


def write_decisions_csv(path, rows: Iterable[dict]):
    """One row per decision window; ``rows`` are dicts keyed by DECISION_CSV_FIELDS."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=DECISION_CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in DECISION_CSV_FIELDS})
