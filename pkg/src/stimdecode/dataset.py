"""Recordings data model, on-disk container, and a synthetic forward-model generator.

Container layout (all paths relative to the dataset directory)::

    manifest.json                       UTF-8 JSON, see ``MANIFEST_FORMAT``
    <subject>/<condition>_<trial>_eeg.f64   float64 little-endian, time-major [T x C]
    <subject>/<condition>_<trial>_env.f64   float64 little-endian, time-major [T x 2]

Attention labels are stored in the manifest as ``[start_sample, label]`` runs.
"""
from __future__ import annotations

import enum
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from .decoder import AttentionLabels, lag_count
from .envelope import Envelope
from .errors import (
    ConfigError,
    CorruptDatasetError,
    MissingFileError,
    SchemaError,
    ShapeError,
)
from .signal import MultichannelSignal, design_butterworth_bandpass, filtfilt, zscore_per_trial

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "stimdecode-dataset"
MANIFEST_VERSION = 1

__all__ = [
    "Condition",
    "Trial",
    "Dataset",
    "SyntheticConfig",
    "load_dataset",
    "save_dataset",
    "generate_synthetic",
    "forward_eeg",
    "synthetic_envelope",
    "validate_real_layout",
    "preprocess_trial",
    "preprocess_dataset",
    "MANIFEST_FORMAT",
]


class Condition(str, enum.Enum):
    NoVisuals = "NoVisuals"
    StaticVideo = "StaticVideo"
    MovingVideo = "MovingVideo"
    MovingTargetNoise = "MovingTargetNoise"

    @property
    def congruent(self) -> bool:
        return self is Condition.StaticVideo

    @property
    def description(self) -> str:
        return _DESCRIPTIONS[self]

    @classmethod
    def parse(cls, value) -> "Condition":
        if isinstance(value, cls):
            return value
        try:
            return cls(value)
        except ValueError:
            raise SchemaError(
                f"unknown condition {value!r}; expected one of {[c.value for c in cls]}") from None


_DESCRIPTIONS = {
    Condition.NoVisuals: "fixate an imaginary point on a black screen",
    Condition.StaticVideo: "fixate a static video of the attended speaker on the attended side",
    Condition.MovingVideo: "follow a video of the attended speaker moving horizontally",
    Condition.MovingTargetNoise: "follow a moving crosshair, with background babble at -1 dB SNR",
}


@dataclass(frozen=True)
class Trial:
    """One recording: EEG, the two competing envelopes and per-sample labels."""

    subject: str
    condition: Condition
    trial: int
    eeg: MultichannelSignal
    s1: Envelope
    s2: Envelope
    labels: AttentionLabels
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "condition", Condition.parse(self.condition))
        for name in ("s1", "s2"):
            env = getattr(self, name)
            if not isinstance(env, Envelope):
                x = env.samples if isinstance(env, MultichannelSignal) else env
                object.__setattr__(self, name, Envelope(x, self.eeg.fs))
        n = self.eeg.n_samples
        if not (self.s1.n_samples == self.s2.n_samples == len(self.labels) == n):
            raise ShapeError(
                f"trial {self.key}: eeg {n}, s1 {self.s1.n_samples}, s2 {self.s2.n_samples}, "
                f"labels {len(self.labels)} samples")
        if not (np.isclose(self.s1.fs, self.eeg.fs) and np.isclose(self.s2.fs, self.eeg.fs)):
            raise ShapeError(f"trial {self.key}: envelope and EEG rates differ")

    @property
    def key(self) -> Tuple[str, str, int]:
        return (self.subject, self.condition.value, self.trial)

    @property
    def fs(self) -> float:
        return self.eeg.fs

    @property
    def n_samples(self) -> int:
        return self.eeg.n_samples

    @property
    def duration_s(self) -> float:
        return self.eeg.duration_s

    def attended(self) -> np.ndarray:
        return np.where(self.labels.y == 1, self.s1.values, self.s2.values)


@dataclass
class Dataset:
    """Subjects, each with a list of trials; cells may be missing."""

    name: str
    subjects: Dict[str, List[Trial]] = field(default_factory=dict)
    conditions: Tuple[Condition, ...] = tuple(Condition)
    trials_per_condition: int = 2
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.conditions = tuple(Condition.parse(c) for c in self.conditions)
        for sid, trials in self.subjects.items():
            seen = set()
            for t in trials:
                if t.subject != sid:
                    raise ShapeError(f"trial {t.key} filed under subject {sid!r}")
                if t.key in seen:
                    raise ShapeError(f"duplicate trial {t.key}")
                seen.add(t.key)

    def trials(self) -> Iterator[Trial]:
        for sid in self.subjects:
            yield from self.subjects[sid]

    def trial(self, key) -> Trial:
        subject, condition, idx = key
        for t in self.subjects[subject]:
            if t.key == (subject, Condition.parse(condition).value, idx):
                return t
        raise KeyError(key)

    def subject_ids(self) -> List[str]:
        return list(self.subjects)

    def completeness(self) -> Dict[str, Dict[str, List[int]]]:
        """Present trial indices per subject and condition."""
        out = {}
        for sid, trials in self.subjects.items():
            cells = {c.value: [] for c in self.conditions}
            for t in trials:
                cells.setdefault(t.condition.value, []).append(t.trial)
            out[sid] = {c: sorted(v) for c, v in cells.items()}
        return out

    def absent_cells(self) -> List[Tuple[str, str, int]]:
        out = []
        for sid, cells in self.completeness().items():
            for c in self.conditions:
                for i in range(1, self.trials_per_condition + 1):
                    if i not in cells.get(c.value, []):
                        out.append((sid, c.value, i))
        return out

    @property
    def fs(self) -> Optional[float]:
        rates = {t.fs for t in self.trials()}
        return rates.pop() if len(rates) == 1 else None

    @property
    def n_channels(self) -> Optional[int]:
        counts = {t.eeg.n_channels for t in self.trials()}
        return counts.pop() if len(counts) == 1 else None


def validate_real_layout(trial: Trial, duration_s: float = 600.0, switch_s: float = 300.0):
    """Check the recorded-experiment layout: fixed duration, one switch at the midpoint."""
    n_expected = int(round(duration_s * trial.fs))
    if trial.n_samples != n_expected:
        raise SchemaError(
            f"trial {trial.key}: {trial.n_samples} samples, expected {n_expected} "
            f"({duration_s} s at {trial.fs} Hz)")
    switches = trial.labels.switch_points()
    at = int(round(switch_s * trial.fs))
    if switches != [at]:
        raise SchemaError(
            f"trial {trial.key}: label switches at samples {switches}, expected exactly one "
            f"at {at} ({switch_s} s)")


# --------------------------------------------------------------------------- container

def _blob_names(t: Trial) -> Tuple[str, str]:
    stem = f"{t.subject}/{t.condition.value}_{t.trial}"
    return stem + "_eeg.f64", stem + "_env.f64"


def _write_blob(path: Path, x: np.ndarray):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(x, dtype="<f8").tobytes())


def _read_blob(path: Path, shape: Tuple[int, int]) -> np.ndarray:
    if not path.exists():
        raise MissingFileError(f"{path}: blob not found")
    raw = path.read_bytes()
    expected = shape[0] * shape[1] * 8
    if len(raw) != expected:
        raise CorruptDatasetError(
            f"{path}: {len(raw)} bytes, manifest shape {list(shape)} needs {expected}")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def save_dataset(dataset: Dataset, directory, force: bool = False) -> Path:
    """Write the dataset container; refuses to overwrite unless ``force``."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if manifest_path.exists() and not force:
        raise ConfigError(f"{manifest_path} exists; pass force=True to overwrite")
    try:
        directory.mkdir(parents=True, exist_ok=True)
        subjects = []
        for sid, trials in dataset.subjects.items():
            entries = []
            for t in trials:
                eeg_name, env_name = _blob_names(t)
                _write_blob(directory / eeg_name, t.eeg.samples)
                _write_blob(directory / env_name,
                            np.column_stack([t.s1.values, t.s2.values]))
                entries.append({
                    "condition": t.condition.value,
                    "trial": t.trial,
                    "fs": t.fs,
                    "n_samples": t.n_samples,
                    "n_channels": t.eeg.n_channels,
                    "channel_labels": list(t.eeg.channel_labels) if t.eeg.channel_labels else None,
                    "eeg": eeg_name,
                    "envelopes": env_name,
                    "labels": [list(r) for r in t.labels.runs()],
                    "metadata": t.metadata,
                })
            subjects.append({"id": sid, "trials": entries})
        manifest = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "name": dataset.name,
            "conditions": [c.value for c in dataset.conditions],
            "trials_per_condition": dataset.trials_per_condition,
            "metadata": dataset.metadata,
            "subjects": subjects,
            "completeness": dataset.completeness(),
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                 encoding="utf-8")
    except OSError as exc:
        raise OSError(f"{exc.filename or directory}: {exc.strerror or exc}") from exc
    return manifest_path


_MANIFEST_KEYS = {"format", "version", "name", "conditions", "trials_per_condition",
                  "metadata", "subjects", "completeness"}
_TRIAL_KEYS = {"condition", "trial", "fs", "n_samples", "n_channels", "channel_labels",
               "eeg", "envelopes", "labels", "metadata"}


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise SchemaError(f"{where}: missing required field {key!r}")
    return obj[key]


def load_dataset(manifest_path) -> Dataset:
    """Load a container written by :func:`save_dataset` (path to the manifest or its directory)."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise MissingFileError(f"{path}: manifest not found")
    try:
        m = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from exc
    if m.get("format") != MANIFEST_FORMAT:
        raise SchemaError(f"{path}: format is {m.get('format')!r}, expected {MANIFEST_FORMAT!r}")
    for extra in sorted(set(m) - _MANIFEST_KEYS):
        log.warning("%s: ignoring unknown manifest field %r", path, extra)
    root = path.parent
    subjects = {}
    for s in _require(m, "subjects", str(path)):
        sid = str(_require(s, "id", f"{path}: subject"))
        trials = []
        for e in _require(s, "trials", f"{path}: subject {sid}"):
            where = f"{path}: subject {sid} trial"
            for extra in sorted(set(e) - _TRIAL_KEYS):
                log.warning("%s: ignoring unknown field %r", where, extra)
            cond = Condition.parse(_require(e, "condition", where))
            n = int(_require(e, "n_samples", where))
            c = int(_require(e, "n_channels", where))
            fs = float(_require(e, "fs", where))
            eeg = _read_blob(root / _require(e, "eeg", where), (n, c))
            env = _read_blob(root / _require(e, "envelopes", where), (n, 2))
            try:
                labels = AttentionLabels.from_runs(_require(e, "labels", where), n)
            except ShapeError as exc:
                raise CorruptDatasetError(f"{where}: {exc}") from exc
            trials.append(Trial(
                subject=sid, condition=cond, trial=int(_require(e, "trial", where)),
                eeg=MultichannelSignal(eeg, fs, e.get("channel_labels")),
                s1=Envelope(env[:, 0], fs), s2=Envelope(env[:, 1], fs),
                labels=labels, metadata=e.get("metadata") or {}))
        subjects[sid] = trials
    ds = Dataset(name=m.get("name", path.parent.name), subjects=subjects,
                 conditions=tuple(m.get("conditions", [c.value for c in Condition])),
                 trials_per_condition=int(m.get("trials_per_condition", 2)),
                 metadata=m.get("metadata") or {})
    declared = m.get("completeness")
    if declared is not None and declared != ds.completeness():
        raise CorruptDatasetError(f"{path}: completeness map does not match the listed trials")
    return ds


# --------------------------------------------------------------------------- preprocessing

def preprocess_trial(trial: Trial, band_hz=(1.0, 9.0), target_fs: float = 20.0) -> Trial:
    """Apply the bandpass / resample / z-score chain to EEG and both envelopes.

    Label runs are mapped to the new rate by rounding their start times.
    """
    from .signal import preprocess

    eeg = preprocess(trial.eeg, band_hz, target_fs)
    s1 = preprocess(trial.s1, band_hz, target_fs)
    s2 = preprocess(trial.s2, band_hz, target_fs)
    n = eeg.n_samples
    ratio = eeg.fs / trial.fs
    runs = [(int(round(s * ratio)), l) for s, l in trial.labels.runs()]
    meta = dict(trial.metadata)
    meta["preprocessing"] = {"band_hz": list(band_hz), "target_fs": target_fs,
                             "order": 4, "original_fs": trial.fs}
    return Trial(trial.subject, trial.condition, trial.trial, eeg,
                 Envelope(s1.samples, s1.fs), Envelope(s2.samples, s2.fs),
                 AttentionLabels.from_runs(runs, n), meta)


def preprocess_dataset(ds: Dataset, band_hz=(1.0, 9.0), target_fs: float = 20.0) -> Dataset:
    subjects = {sid: [preprocess_trial(t, band_hz, target_fs) for t in trials]
                for sid, trials in ds.subjects.items()}
    return Dataset(ds.name, subjects, ds.conditions, ds.trials_per_condition, dict(ds.metadata))


# --------------------------------------------------------------------------- synthetic data

@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the synthetic forward-model dataset.

    ``snr_db`` is the power ratio of attended-driven EEG to additive noise
    (``inf`` for noiseless); ``unattended_leak_db`` is the power of the
    unattended envelope's contribution relative to the attended one
    (``-inf`` for none). Subjects share a population forward kernel drawn from
    ``family_seed``; ``subject_variability`` scales each subject's deviation.
    ``missing`` lists ``(subject_index, condition, trial)`` cells to leave out.
    """

    n_subjects: int = 4
    conditions: Tuple[Condition, ...] = tuple(Condition)
    trials_per_condition: int = 2
    duration_s: float = 600.0
    fs: float = 20.0
    n_channels: int = 16
    kernel_ms: float = 400.0
    snr_db: float = 0.0
    unattended_leak_db: float = -6.0
    subject_variability: float = 0.5
    envelope_band_hz: Tuple[float, float] = (1.0, 9.0)
    envelope_exponent: float = 0.6
    seed: int = 0
    family_seed: int = 0
    name: str = "synthetic"
    missing: Tuple[Tuple[int, str, int], ...] = ()

    def validate(self):
        if self.n_subjects < 1 or self.n_channels < 1 or self.trials_per_condition < 1:
            raise ConfigError("subject, channel and trial counts must be positive")
        if not (math.isfinite(self.fs) and self.fs > 0):
            raise ConfigError(f"sampling rate must be positive, got {self.fs}")
        if not self.duration_s * self.fs >= 4:
            raise ConfigError("trial too short")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ConfigError(f"snr_db must be finite or +inf, got {self.snr_db}")
        if math.isnan(self.unattended_leak_db) or self.unattended_leak_db == math.inf:
            raise ConfigError(f"unattended_leak_db must be finite or -inf, got {self.unattended_leak_db}")
        for s in (self.seed, self.family_seed):
            if int(s) != s or s < 0:
                raise ConfigError(f"seeds must be non-negative integers, got {s}")
        if self.subject_variability < 0:
            raise ConfigError("subject_variability must be >= 0")
        lo, hi = self.envelope_band_hz
        if not 0 < lo < hi < self.fs / 2:
            raise ConfigError(f"envelope band {self.envelope_band_hz} invalid at {self.fs} Hz")
        for c in self.conditions:
            Condition.parse(c)

    def kernel_length(self) -> int:
        return lag_count((0, self.kernel_ms), self.fs)

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["conditions"] = [Condition.parse(c).value for c in self.conditions]
        d["envelope_band_hz"] = list(self.envelope_band_hz)
        d["missing"] = [list(m) for m in self.missing]
        for k in ("snr_db", "unattended_leak_db"):
            if math.isinf(d[k]):
                d[k] = "inf" if d[k] > 0 else "-inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        for k in ("snr_db", "unattended_leak_db"):
            if k in d:
                d[k] = float(d[k])
        if "conditions" in d:
            d["conditions"] = tuple(Condition.parse(c) for c in d["conditions"])
        if "envelope_band_hz" in d:
            d["envelope_band_hz"] = tuple(d["envelope_band_hz"])
        if "missing" in d:
            d["missing"] = tuple(tuple(m) for m in d["missing"])
        return cls(**d)


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in key]))


def _kernel(rng: np.random.Generator, n_channels: int, length: int) -> np.ndarray:
    # smooth-ish random responses, tapered toward the longest lags
    taper = np.hanning(2 * length + 1)[length:-1] if length > 1 else np.ones(1)
    return rng.standard_normal((n_channels, length)) * taper


def synthetic_envelope(rng: np.random.Generator, n: int, fs: float,
                       band_hz=(1.0, 9.0), exponent: float = 0.6) -> np.ndarray:
    """Gaussian noise bandpassed to ``band_hz``, compressed as ``|x| ** exponent``, z-scored."""
    filt = design_butterworth_bandpass(4, band_hz[0], band_hz[1], fs)
    pad = max(filt.padlen + 1, int(4 * fs / band_hz[0]))
    noise = MultichannelSignal(rng.standard_normal(n + 2 * pad), fs)
    x = filtfilt(filt, noise).samples[pad:pad + n, 0]
    env = np.abs(x) ** exponent
    return zscore_per_trial(MultichannelSignal(env, fs)).samples[:, 0]


def forward_eeg(s_att: np.ndarray, s_unatt: np.ndarray, h: np.ndarray, g: np.ndarray,
                leak_gain: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """Causal forward model: channel ``c`` is ``h[c] * s_att + leak_gain * g[c] * s_unatt``.

    Returns the attended-driven and unattended-driven parts separately, each ``[T x C]``.
    """
    att = np.stack([sps.lfilter(hc, [1.0], s_att) for hc in h], axis=1)
    if leak_gain == 0.0:
        return att, np.zeros_like(att)
    un = np.stack([sps.lfilter(gc, [1.0], s_unatt) for gc in g], axis=1)
    return att, leak_gain * un


def _background(rng, n, mixing, cfg) -> np.ndarray:
    # in-band sources (the same band the EEG is preprocessed to), more of them
    # than channels so no spatial filter can null them
    filt = design_butterworth_bandpass(4, cfg.envelope_band_hz[0], cfg.envelope_band_hz[1], cfg.fs)
    pad = max(filt.padlen + 1, int(4 * cfg.fs / cfg.envelope_band_hz[0]))
    src = MultichannelSignal(rng.standard_normal((n + 2 * pad, mixing.shape[1])), cfg.fs)
    return filtfilt(filt, src).samples[pad:pad + n] @ mixing.T


def _power(x: np.ndarray) -> float:
    return float(np.mean(x ** 2))


def _synthetic_trial(cfg: SyntheticConfig, sid: str, s_idx: int, cond: Condition,
                     c_idx: int, t_idx: int, h, g, mixing) -> Trial:
    rng = _rng(cfg.seed, s_idx, c_idx, t_idx, 1)
    n = int(round(cfg.duration_s * cfg.fs))
    env1 = synthetic_envelope(rng, n, cfg.fs, cfg.envelope_band_hz, cfg.envelope_exponent)
    env2 = synthetic_envelope(rng, n, cfg.fs, cfg.envelope_band_hz, cfg.envelope_exponent)
    first = int(rng.integers(1, 3))
    half = n // 2
    labels = AttentionLabels.from_runs([(0, first), (half, 3 - first)], n)
    s_att = np.where(labels.y == 1, env1, env2)
    s_un = np.where(labels.y == 1, env2, env1)

    leak = 0.0 if cfg.unattended_leak_db == -math.inf else 1.0
    att, un = forward_eeg(s_att, s_un, h, g, leak)
    p_att = _power(att)
    if leak:
        un = un * math.sqrt(p_att * 10 ** (cfg.unattended_leak_db / 10) / _power(un))
    eeg = att + un
    if cfg.snr_db != math.inf:
        noise = _background(rng, n, mixing, cfg)
        noise *= math.sqrt(p_att / 10 ** (cfg.snr_db / 10) / _power(noise))
        eeg = eeg + noise
    eeg = zscore_per_trial(MultichannelSignal(eeg, cfg.fs))
    meta = {"synthetic": True, "first_attended": first}
    return Trial(sid, cond, t_idx, eeg, Envelope(env1, cfg.fs), Envelope(env2, cfg.fs),
                 labels, meta)


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Deterministic dataset drawn from a linear causal forward model (see SyntheticConfig)."""
    cfg.validate()
    L = cfg.kernel_length()
    fam = _rng(cfg.family_seed, 0)
    h_pop = _kernel(fam, cfg.n_channels, L)
    g_pop = _kernel(fam, cfg.n_channels, L)
    missing = {(int(s), Condition.parse(c).value, int(t)) for s, c, t in cfg.missing}
    subjects = {}
    width = max(2, len(str(cfg.n_subjects)))
    for s_idx in range(cfg.n_subjects):
        sid = f"S{s_idx + 1:0{width}d}"
        srng = _rng(cfg.seed, s_idx, 0)
        v = cfg.subject_variability
        h = h_pop + v * _kernel(srng, cfg.n_channels, L)
        g = g_pop + v * _kernel(srng, cfg.n_channels, L)
        # spatially correlated background activity, fixed per subject
        mixing = srng.standard_normal((cfg.n_channels, 2 * cfg.n_channels))
        trials = []
        for c_idx, cond in enumerate(Condition):
            if cond not in [Condition.parse(c) for c in cfg.conditions]:
                continue
            for t_idx in range(1, cfg.trials_per_condition + 1):
                if (s_idx, cond.value, t_idx) in missing:
                    continue
                trials.append(_synthetic_trial(cfg, sid, s_idx, cond, c_idx, t_idx,
                                               h, g, mixing))
        subjects[sid] = trials
    return Dataset(cfg.name, subjects, tuple(Condition.parse(c) for c in cfg.conditions),
                   cfg.trials_per_condition, {"synthetic_config": cfg.to_dict()})
