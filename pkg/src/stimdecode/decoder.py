"""Backward (stimulus-reconstruction) decoder.

The decoder reconstructs the attended envelope as a linear combination of
time-lagged EEG,

    s_hat(t) = sum_c sum_{l=0}^{L-1} d[c * L + l] * x_c(t + l),

i.e. an anti-causal spatio-temporal filter. Training solves the normal
equations with the covariance shrunk toward a scaled identity.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from scipy import linalg

from .envelope import Envelope
from .errors import (
    ConfigError,
    CorruptDatasetError,
    InvalidLagError,
    MissingFileError,
    SchemaError,
    ShapeError,
    SingularSystemError,
)
from .signal import MultichannelSignal

__all__ = [
    "LaggedDesignMatrix",
    "AttentionLabels",
    "TrainingStatistics",
    "DecoderModel",
    "lag_count",
    "build_lag_matrix",
    "select_attended",
    "accumulate_statistics",
    "trial_statistics",
    "ledoit_wolf_intensity",
    "ledoit_wolf_from_statistics",
    "solve_decoder",
    "train_decoder",
    "reconstruct",
    "save_decoder",
    "load_decoder",
]


def _vector(x) -> np.ndarray:
    if isinstance(x, MultichannelSignal):
        if x.n_channels != 1:
            raise ShapeError(f"expected a single-channel signal, got {x.n_channels} channels")
        return x.samples[:, 0]
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 2 and v.shape[1] == 1:
        v = v[:, 0]
    if v.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {v.shape}")
    return v


def lag_count(lags_ms: Sequence[float], fs: float) -> int:
    """Number of lags covering ``lags_ms = (0, max_ms)`` at ``fs``; 9 for 0-400 ms at 20 Hz."""
    start, stop = lags_ms
    if start != 0:
        raise ConfigError(f"lag range must start at 0 ms (anti-causal decoder), got {start}")
    if stop < 0:
        raise InvalidLagError(f"lag range end must be >= 0 ms, got {stop}")
    # tolerance keeps e.g. 0.4 * 20 from flooring to 7
    return int(math.floor(stop * fs / 1000.0 + 1e-9)) + 1


@dataclass(frozen=True)
class LaggedDesignMatrix:
    """Block-Hankel matrix ``[X_1 ... X_C]``; column ``c * L + l`` holds ``x_c(t + l)``."""

    data: np.ndarray
    n_channels: int
    n_lags: int

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    def block(self, c: int) -> np.ndarray:
        return self.data[:, c * self.n_lags:(c + 1) * self.n_lags]


def build_lag_matrix(eeg, n_lags: int) -> LaggedDesignMatrix:
    """Stack lags ``0 .. n_lags - 1`` of every channel, zero-padding past the end."""
    x = eeg.samples if isinstance(eeg, MultichannelSignal) else np.asarray(eeg, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    T, C = x.shape
    if int(n_lags) != n_lags or n_lags < 1:
        raise InvalidLagError(f"number of lags must be a positive integer, got {n_lags}")
    if n_lags > T:
        raise InvalidLagError(f"{n_lags} lags exceed the signal length {T}")
    X = np.zeros((T, C, n_lags))
    for l in range(n_lags):
        X[:T - l, :, l] = x[l:]
    return LaggedDesignMatrix(X.reshape(T, C * n_lags), C, int(n_lags))


@dataclass(frozen=True)
class AttentionLabels:
    """Per-sample attended-speaker labels (1 or 2)."""

    y: np.ndarray

    def __post_init__(self):
        y = np.asarray(self.y)
        if y.ndim != 1 or y.size == 0:
            raise ShapeError(f"labels must be a non-empty vector, got shape {y.shape}")
        if not np.all((y == 1) | (y == 2)):
            raise ShapeError("labels must be 1 or 2")
        y = y.astype(np.int8)
        y.flags.writeable = False
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.y.size

    @classmethod
    def constant(cls, n: int, label: int = 1) -> "AttentionLabels":
        return cls(np.full(n, label))

    @classmethod
    def from_runs(cls, runs: Iterable[Sequence[int]], n: int) -> "AttentionLabels":
        """Build from ``(start_sample, label)`` pairs; the first run must start at 0."""
        runs = [(int(s), int(l)) for s, l in runs]
        if not runs or runs[0][0] != 0:
            raise ShapeError("label runs must start at sample 0")
        starts = [s for s, _ in runs] + [n]
        if any(b <= a for a, b in zip(starts, starts[1:])):
            raise ShapeError(f"label run starts must be strictly increasing below {n}")
        y = np.empty(n, dtype=np.int8)
        for (s, l), e in zip(runs, starts[1:]):
            y[s:e] = l
        return cls(y)

    def runs(self) -> list:
        idx = [0] + self.switch_points()
        return [(i, int(self.y[i])) for i in idx]

    def switch_points(self) -> list:
        return (np.flatnonzero(np.diff(self.y)) + 1).tolist()

    def segments(self) -> list:
        """``(start, stop, label)`` for every constant-label stretch."""
        bounds = [0] + self.switch_points() + [len(self)]
        return [(a, b, int(self.y[a])) for a, b in zip(bounds, bounds[1:])]


def select_attended(s1, s2, labels: AttentionLabels) -> np.ndarray:
    """Attended envelope: ``s1`` where the label is 1, ``s2`` where it is 2."""
    a, b = _vector(s1), _vector(s2)
    if not (a.size == b.size == len(labels)):
        raise ShapeError(
            f"length mismatch: s1 {a.size}, s2 {b.size}, labels {len(labels)}")
    return np.where(labels.y == 1, a, b)


def accumulate_statistics(X: LaggedDesignMatrix, s_a):
    """``(R_xx, r_xs) = (X^T X, X^T s_a)``, unnormalized."""
    s = _vector(s_a)
    if s.size != X.n_samples:
        raise ShapeError(f"design matrix has {X.n_samples} rows, envelope {s.size} samples")
    R = X.data.T @ X.data
    # enforce exact symmetry regardless of BLAS blocking
    R = np.triu(R) + np.triu(R, 1).T
    return R, X.data.T @ s


@dataclass
class TrainingStatistics:
    """Additive sufficient statistics for training and shrinkage estimation.

    ``fourth`` is the sum over samples of ``||x_t||^4``, which together with
    ``R_xx`` gives the Ledoit-Wolf dispersion term without revisiting the data.
    """

    R_xx: np.ndarray
    r_xs: np.ndarray
    n_samples: int
    fourth: float
    trial_lambdas: list = field(default_factory=list)

    def __add__(self, other: "TrainingStatistics") -> "TrainingStatistics":
        if self.R_xx.shape != other.R_xx.shape:
            raise ShapeError(
                f"cannot pool statistics of size {self.R_xx.shape} and {other.R_xx.shape}")
        return TrainingStatistics(self.R_xx + other.R_xx, self.r_xs + other.r_xs,
                                  self.n_samples + other.n_samples,
                                  self.fourth + other.fourth,
                                  self.trial_lambdas + other.trial_lambdas)

    @classmethod
    def pool(cls, stats: Iterable["TrainingStatistics"]) -> "TrainingStatistics":
        stats = list(stats)
        if not stats:
            raise ShapeError("no training statistics to pool")
        out = stats[0]
        for s in stats[1:]:
            out = out + s
        return out


def _lw_intensity(S: np.ndarray, fourth: float, T: int) -> float:
    p = S.shape[0]
    nu = np.trace(S) / p
    target_dev = S.copy()
    target_dev[np.diag_indices(p)] -= nu
    denom = float(np.sum(target_dev ** 2))
    if denom <= (np.finfo(float).eps * max(abs(nu), np.finfo(float).tiny)) ** 2 * p:
        return 1.0
    # sum_t ||x_t x_t^T - S||_F^2 = sum_t ||x_t||^4 - T ||S||_F^2
    num = (fourth - T * float(np.sum(S ** 2))) / T ** 2
    return float(min(1.0, max(0.0, num / denom)))


def trial_statistics(X: LaggedDesignMatrix, s_a) -> TrainingStatistics:
    """Statistics of one trial, including its own shrinkage intensity."""
    R, r = accumulate_statistics(X, s_a)
    T = X.n_samples
    fourth = float(np.sum(np.einsum("ij,ij->i", X.data, X.data) ** 2))
    lam = _lw_intensity(R / T, fourth, T) if T >= 2 else 1.0
    return TrainingStatistics(R, r, T, fourth, [lam])


def ledoit_wolf_intensity(X: Union[LaggedDesignMatrix, np.ndarray]) -> float:
    """Ledoit-Wolf shrinkage intensity toward ``nu * I`` for ``S = X^T X / T``.

    Returns 1 when the sample covariance already equals the target.
    """
    x = X.data if isinstance(X, LaggedDesignMatrix) else np.asarray(X, dtype=np.float64)
    T = x.shape[0]
    if T < 2:
        raise ShapeError(f"shrinkage estimation needs at least 2 samples, got {T}")
    S = x.T @ x / T
    fourth = float(np.sum(np.einsum("ij,ij->i", x, x) ** 2))
    return _lw_intensity(S, fourth, T)


def ledoit_wolf_from_statistics(stats: TrainingStatistics, mode: str = "pooled") -> float:
    """Intensity from pooled statistics, or (``mode="per-trial"``, experimental)
    the mean of per-trial intensities."""
    if mode == "pooled":
        return _lw_intensity(stats.R_xx / stats.n_samples, stats.fourth, stats.n_samples)
    if mode == "per-trial":
        return float(np.mean(stats.trial_lambdas))
    raise ConfigError(f"unknown shrinkage pooling mode {mode!r}")


@dataclass(frozen=True)
class DecoderModel:
    """Trained decoder ``d`` with the statistics it was solved from."""

    d: np.ndarray
    R_xx: np.ndarray
    r_xs: np.ndarray
    lam: float
    nu: float
    n_samples: int
    n_channels: Optional[int] = None
    n_lags: Optional[int] = None
    fs: Optional[float] = None
    lags_ms: Optional[tuple] = None

    def coefficients(self) -> np.ndarray:
        """``d`` reshaped to ``(n_channels, n_lags)``."""
        return self.d.reshape(self.n_channels, self.n_lags)

    def reconstruct(self, X: LaggedDesignMatrix) -> np.ndarray:
        return reconstruct(self, X)


def solve_decoder(R_xx, r_xs, lam: float, T: int, **meta) -> DecoderModel:
    """Solve ``((1 - lam) S + lam nu I) d = r_xs / T`` with ``S = R_xx / T``.

    Uses a Cholesky factorization followed by one step of iterative refinement.
    """
    R = np.asarray(R_xx, dtype=np.float64)
    r = np.asarray(r_xs, dtype=np.float64)
    p = R.shape[0]
    if R.shape != (p, p) or r.shape != (p,):
        raise ShapeError(f"inconsistent shapes R_xx {R.shape}, r_xs {r.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"shrinkage intensity must lie in [0, 1], got {lam}")
    S = R / T
    nu = float(np.trace(S) / p)
    A = (1.0 - lam) * S
    A[np.diag_indices(p)] += lam * nu
    b = r / T
    hint = " with lambda > 0" if lam == 0 else ""
    if lam == 0 and np.linalg.cond(A) > 1e14:
        raise SingularSystemError(
            f"covariance is numerically singular; retry{hint} (shrinkage)")
    try:
        factor = linalg.cho_factor(A, lower=True, check_finite=False)
    except linalg.LinAlgError as exc:
        raise SingularSystemError(
            f"system is not positive definite; retry{hint} (shrinkage)") from exc
    d = linalg.cho_solve(factor, b, check_finite=False)
    d = d + linalg.cho_solve(factor, b - A @ d, check_finite=False)
    return DecoderModel(d=d, R_xx=R, r_xs=r, lam=float(lam), nu=nu, n_samples=int(T), **meta)


def train_decoder(stats: TrainingStatistics, shrinkage="ledoit-wolf", **meta) -> DecoderModel:
    """Solve a decoder from pooled statistics.

    ``shrinkage`` is ``"ledoit-wolf"`` (pooled estimate), ``"ledoit-wolf-per-trial"``
    (experimental: mean of per-trial estimates), ``"none"`` or a fixed intensity.
    """
    if shrinkage == "ledoit-wolf":
        lam = ledoit_wolf_from_statistics(stats, "pooled")
    elif shrinkage == "ledoit-wolf-per-trial":
        lam = ledoit_wolf_from_statistics(stats, "per-trial")
    elif shrinkage == "none":
        lam = 0.0
    else:
        lam = float(shrinkage)
    return solve_decoder(stats.R_xx, stats.r_xs, lam, stats.n_samples, **meta)


def reconstruct(model: DecoderModel, X: LaggedDesignMatrix) -> np.ndarray:
    """Reconstructed envelope ``X d``."""
    if X.data.shape[1] != model.d.size:
        raise ShapeError(
            f"design matrix has {X.data.shape[1]} columns, decoder {model.d.size} coefficients")
    return X.data @ model.d


_DECODER_FORMAT = "stimdecode-decoder"


def save_decoder(model: DecoderModel, path) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.f64`` (float64 LE: d, r_xs, R_xx)."""
    path = Path(path)
    blob = path.with_suffix(".f64")
    p = model.d.size
    data = np.concatenate([model.d, model.r_xs, model.R_xx.ravel()]).astype("<f8")
    blob.write_bytes(data.tobytes())
    manifest = {
        "format": _DECODER_FORMAT,
        "version": 1,
        "blob": blob.name,
        "n_coefficients": p,
        "layout": ["d", "r_xs", "R_xx"],
        "lambda": model.lam,
        "nu": model.nu,
        "n_samples": model.n_samples,
        "n_channels": model.n_channels,
        "n_lags": model.n_lags,
        "fs": model.fs,
        "lags_ms": list(model.lags_ms) if model.lags_ms is not None else None,
    }
    out = path.with_suffix(".json")
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def load_decoder(path) -> DecoderModel:
    path = Path(path).with_suffix(".json")
    if not path.exists():
        raise MissingFileError(f"{path}: decoder manifest not found")
    m = json.loads(path.read_text(encoding="utf-8"))
    if m.get("format") != _DECODER_FORMAT:
        raise SchemaError(f"{path}: not a decoder manifest")
    blob = path.parent / m["blob"]
    if not blob.exists():
        raise MissingFileError(f"{blob}: decoder coefficients not found")
    p = int(m["n_coefficients"])
    data = np.frombuffer(blob.read_bytes(), dtype="<f8").astype(np.float64)
    if data.size != 2 * p + p * p:
        raise CorruptDatasetError(f"{blob}: expected {2 * p + p * p} values, found {data.size}")
    lags = m.get("lags_ms")
    return DecoderModel(d=data[:p], r_xs=data[p:2 * p], R_xx=data[2 * p:].reshape(p, p),
                        lam=m["lambda"], nu=m["nu"], n_samples=m["n_samples"],
                        n_channels=m.get("n_channels"), n_lags=m.get("n_lags"),
                        fs=m.get("fs"), lags_ms=tuple(lags) if lags is not None else None)
