"""Cross-validation protocols and evaluation reports.

Every fold pools the per-trial training statistics of its training trials,
estimates one shrinkage intensity, solves one decoder and scores each test
trial over decision windows of several lengths. Trials are never split.
"""
from __future__ import annotations

import csv
import enum
import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .dataset import Dataset, Trial
from .decision import (
    DECISION_CSV_FIELDS,
    DecisionWindowConfig,
    WindowedDecisions,
    significance_threshold,
    windowed_decisions,
    write_decisions_csv,
)
from .decoder import (
    DecoderModel,
    TrainingStatistics,
    build_lag_matrix,
    lag_count,
    reconstruct,
    train_decoder,
    trial_statistics,
)
from .errors import CompatibilityError, ConfigError, NoWindowsError, PlanError

log = logging.getLogger(__name__)

DEFAULT_WINDOW_LENGTHS = (1.0, 2.0, 5.0, 10.0, 20.0, 30.0, 60.0)

__all__ = [
    "Protocol",
    "Fold",
    "FoldPlan",
    "DecoderConfig",
    "EvaluationReport",
    "plan_folds",
    "run_protocol",
    "cross_dataset",
    "evaluate_decoder",
    "train_on_dataset",
    "mismatched_envelopes",
    "DEFAULT_WINDOW_LENGTHS",
]

TrialKey = Tuple[str, str, int]


class Protocol(str, enum.Enum):
    LOTO_PerCondition = "loto-per-condition"
    LOTO_AllConditions = "loto"
    LOCO = "loco"
    LOSO = "loso"
    CrossDataset = "cross-dataset"

    @classmethod
    def parse(cls, value) -> "Protocol":
        if isinstance(value, cls):
            return value
        for p in cls:
            if value in (p.value, p.name):
                return p
        raise ConfigError(f"unknown protocol {value!r}; expected one of {[p.value for p in cls]}")


@dataclass(frozen=True)
class Fold:
    index: int
    train: Tuple[TrialKey, ...]
    test: Tuple[TrialKey, ...]
    subject: Optional[str] = None
    condition: Optional[str] = None


@dataclass
class FoldPlan:
    protocol: Protocol
    folds: List[Fold]
    skipped: List[dict] = field(default_factory=list)


@dataclass(frozen=True)
class DecoderConfig:
    lags_ms: Tuple[float, float] = (0.0, 400.0)
    shrinkage: object = "ledoit-wolf"

    def to_dict(self) -> dict:
        return {"lags_ms": list(self.lags_ms), "shrinkage": self.shrinkage}


def _by_condition(trials: Sequence[Trial]) -> Dict[str, List[Trial]]:
    out: Dict[str, List[Trial]] = {}
    for t in trials:
        out.setdefault(t.condition.value, []).append(t)
    return out


def plan_folds(dataset: Dataset, protocol) -> FoldPlan:
    """Enumerate folds deterministically; cells without enough trials are skipped and recorded."""
    protocol = Protocol.parse(protocol)
    folds: List[Fold] = []
    skipped: List[dict] = []

    def add(train, test, subject=None, condition=None):
        folds.append(Fold(len(folds), tuple(t.key for t in train), tuple(t.key for t in test),
                          subject, condition))

    def skip(reason, **scope):
        log.info("skipping %s: %s", scope, reason)
        skipped.append({**scope, "reason": reason})

    if protocol is Protocol.LOTO_PerCondition:
        for sid, trials in dataset.subjects.items():
            cells = _by_condition(trials)
            for cond in dataset.conditions:
                cell = cells.get(cond.value, [])
                if len(cell) < 2:
                    skip(f"{len(cell)} trial(s) present, need 2", subject=sid, condition=cond.value)
                    continue
                for t in cell:
                    add([o for o in cell if o is not t], [t], sid, cond.value)
    elif protocol is Protocol.LOTO_AllConditions:
        for sid, trials in dataset.subjects.items():
            if len(trials) < 2:
                skip(f"{len(trials)} trial(s) present, need 2", subject=sid)
                continue
            for t in trials:
                add([o for o in trials if o is not t], [t], sid, t.condition.value)
    elif protocol is Protocol.LOCO:
        for sid, trials in dataset.subjects.items():
            cells = _by_condition(trials)
            if len(cells) < 2:
                skip(f"{len(cells)} condition(s) present, need 2", subject=sid)
                continue
            for cond in dataset.conditions:
                if cond.value not in cells:
                    skip("condition absent", subject=sid, condition=cond.value)
                    continue
                train = [t for t in trials if t.condition.value != cond.value]
                add(train, cells[cond.value], sid, cond.value)
    elif protocol is Protocol.LOSO:
        sids = [s for s, trials in dataset.subjects.items() if trials]
        if len(sids) < 2:
            raise PlanError(f"LOSO needs at least 2 subjects with data, found {len(sids)}")
        for sid in sids:
            train = [t for o in sids if o != sid for t in dataset.subjects[o]]
            add(train, dataset.subjects[sid], sid)
    else:
        raise PlanError("cross-dataset evaluation needs two datasets; use cross_dataset()")
    if not folds:
        raise PlanError(f"protocol {protocol.value} yields no folds on dataset {dataset.name!r}")
    return FoldPlan(protocol, folds, skipped)


# --------------------------------------------------------------------------- execution

@dataclass
class _FoldResult:
    fold: Fold
    lam: float
    decisions: Dict[float, List[Tuple[TrialKey, WindowedDecisions]]]


def _compute_statistics(trials: Sequence[Trial], L: int, jobs: int) -> Dict[TrialKey, TrainingStatistics]:
    def one(t: Trial):
        return trial_statistics(build_lag_matrix(t.eeg, L), t.attended())
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        stats = list(pool.map(one, trials))
    return {t.key: s for t, s in zip(trials, stats)}


def _fit(stats: Dict[TrialKey, TrainingStatistics], keys: Sequence[TrialKey], cfg: DecoderConfig,
         L: int, fs: float):
    pooled = TrainingStatistics.pool(stats[k] for k in keys)
    return train_decoder(pooled, cfg.shrinkage, n_lags=L, fs=fs, lags_ms=tuple(cfg.lags_ms),
                         n_channels=pooled.R_xx.shape[0] // L)


def _score(model, trials: Sequence[Trial], window_lengths, L, overlap, drop_partial):
    out = {wl: [] for wl in window_lengths}
    for t in trials:
        s_hat = reconstruct(model, build_lag_matrix(t.eeg, L))
        for wl in window_lengths:
            cfg = DecisionWindowConfig(wl, overlap, drop_partial)
            try:
                d = windowed_decisions(s_hat, t.s1, t.s2, t.labels, cfg, t.fs)
            except NoWindowsError:
                # window longer than the trial's label segments: flagged in the report
                d = WindowedDecisions()
            out[wl].append((t.key, d))
    return out


def _execute(train_ds: Dataset, test_ds: Dataset, plan: FoldPlan, window_lengths, cfg: DecoderConfig,
             jobs: int, overlap: float, drop_partial: bool,
             check_disjoint: bool = True) -> List[_FoldResult]:
    fs = train_ds.fs
    if fs is None or test_ds.fs is None or not np.isclose(fs, test_ds.fs):
        raise CompatibilityError("all trials must share one sampling rate")
    L = lag_count(cfg.lags_ms, fs)
    train_keys = sorted({k for f in plan.folds for k in f.train})
    stats = _compute_statistics([train_ds.trial(k) for k in train_keys], L, jobs)

    def run(fold: Fold) -> _FoldResult:
        overlap_keys = set(fold.train) & set(fold.test) if check_disjoint else set()
        if overlap_keys:
            raise PlanError(f"fold {fold.index} trains on its own test trials {sorted(overlap_keys)}")
        model = _fit(stats, fold.train, cfg, L, fs)
        decisions = _score(model, [test_ds.trial(k) for k in fold.test], window_lengths, L,
                           overlap, drop_partial)
        return _FoldResult(fold, model.lam, decisions)

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        return list(pool.map(run, plan.folds))


def train_on_dataset(dataset: Dataset, decoder: DecoderConfig = DecoderConfig(),
                     jobs: int = 1) -> DecoderModel:
    """One decoder from every trial of ``dataset``."""
    fs = dataset.fs
    if fs is None:
        raise CompatibilityError("all trials must share one sampling rate")
    L = lag_count(decoder.lags_ms, fs)
    trials = list(dataset.trials())
    if not trials:
        raise PlanError(f"dataset {dataset.name!r} has no trials")
    stats = _compute_statistics(trials, L, jobs)
    return _fit(stats, [t.key for t in trials], decoder, L, fs)


def mismatched_envelopes(dataset: Dataset, seed: int = 0) -> Dataset:
    """Negative control: every trial gets the envelope pair of a different trial.

    Trials are permuted with a random derangement, so EEG and envelopes are
    independent while each keeps its own statistics; accuracies should sit at chance.
    """
    trials = list(dataset.trials())
    if len(trials) < 2:
        raise PlanError("a mismatched-envelope control needs at least 2 trials")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(len(trials))
        if np.all(perm != np.arange(len(trials))):
            break
    out: Dict[str, List[Trial]] = {sid: [] for sid in dataset.subjects}
    for t, j in zip(trials, perm):
        donor = trials[j]
        n = t.n_samples
        if donor.n_samples < n:
            raise CompatibilityError("mismatched-envelope control needs equal trial lengths")
        out[t.subject].append(Trial(t.subject, t.condition, t.trial, t.eeg,
                                    donor.s1.values[:n], donor.s2.values[:n], t.labels,
                                    {**t.metadata, "envelopes_from": list(donor.key)}))
    return Dataset(dataset.name + "-mismatched", out, dataset.conditions,
                   dataset.trials_per_condition, dict(dataset.metadata))


# --------------------------------------------------------------------------- reporting

def _threshold_entry(n_correct: int, n: int, alpha: float, overlap: float) -> dict:
    entry = {"accuracy": n_correct / n if n else None, "n_decisions": n, "n_correct": n_correct}
    # overlapping windows give dependent decisions; no binomial level applies
    entry["threshold"] = significance_threshold(n, alpha) if n and overlap == 0 else None
    return entry


def _mean_entry(entries: List[dict], alpha: float, overlap: float) -> dict:
    entries = [e for e in entries if e["n_decisions"]]
    if not entries:
        return {"accuracy": None, "n_subjects": 0, "n_decisions": 0, "threshold": None}
    n_min = min(e["n_decisions"] for e in entries)
    return {
        "accuracy": float(np.mean([e["accuracy"] for e in entries])),
        "n_subjects": len(entries),
        # conservative: level for the smallest per-subject decision count
        "n_decisions": n_min,
        "threshold": significance_threshold(n_min, alpha) if overlap == 0 else None,
    }


@dataclass
class EvaluationReport:
    """Per-fold decisions and accuracies plus per-subject/per-condition aggregates."""

    protocol: str
    window_lengths: List[float]
    folds: List[dict]
    per_subject: Dict[str, Dict[str, dict]]
    per_subject_condition: Dict[str, Dict[str, Dict[str, dict]]]
    mean: Dict[str, dict]
    condition_mean: Dict[str, Dict[str, dict]]
    skipped: List[dict]
    provenance: dict

    def accuracy(self, window_len_s: float, condition: Optional[str] = None) -> Optional[float]:
        """Mean over subjects at one window length (optionally for one condition)."""
        key = _wl_key(window_len_s)
        if condition is None:
            return self.mean[key]["accuracy"]
        return self.condition_mean[key].get(condition, {}).get("accuracy")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def decision_rows(self):
        for f in self.folds:
            for wl_key, per_trial in f["decisions"].items():
                for entry in per_trial:
                    subject, condition, trial = entry["trial"]
                    for r in entry["records"]:
                        yield {"subject": subject, "condition": condition, "trial": trial,
                               "fold": f["index"], "window_len_s": float(wl_key), **r}

    def write_decisions_csv(self, path):
        write_decisions_csv(path, self.decision_rows())

    def figure_rows(self):
        """Per-subject accuracy-vs-window-length table (condition ``all`` plus breakdown)."""
        for wl in self.window_lengths:
            key = _wl_key(wl)
            for sid, e in self.per_subject[key].items():
                yield {"subject": sid, "condition": "all", "window_len_s": wl, **_flat(e)}
            for sid, conds in self.per_subject_condition[key].items():
                for cond, e in conds.items():
                    yield {"subject": sid, "condition": cond, "window_len_s": wl, **_flat(e)}

    def write_figure_csv(self, path):
        fields = ["subject", "condition", "window_len_s", "accuracy", "n_decisions", "threshold"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            w.writerows(self.figure_rows())

    def write_summary_csv(self, path):
        fields = ["condition", "window_len_s", "accuracy", "n_subjects", "n_decisions", "threshold"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            w.writeheader()
            for wl in self.window_lengths:
                key = _wl_key(wl)
                w.writerow({"condition": "all", "window_len_s": wl, **self.mean[key]})
                for cond, e in self.condition_mean[key].items():
                    w.writerow({"condition": cond, "window_len_s": wl, **e})


def _flat(e: dict) -> dict:
    return {"accuracy": e["accuracy"], "n_decisions": e["n_decisions"], "threshold": e["threshold"]}


def _wl_key(wl: float) -> str:
    return repr(float(wl))


def _build_report(protocol: Protocol, results: List[_FoldResult], window_lengths, plan: FoldPlan,
                  alpha: float, overlap: float, provenance: dict,
                  conditions: Sequence[str]) -> EvaluationReport:
    folds = []
    # (window, subject) -> [correct, total]; (window, subject, condition) likewise
    subj: Dict[tuple, List[int]] = {}
    subj_cond: Dict[tuple, List[int]] = {}
    for res in results:
        f = res.fold
        entry = {"index": f.index, "subject": f.subject, "condition": f.condition,
                 "train": [list(k) for k in f.train], "test": [list(k) for k in f.test],
                 "lambda": res.lam, "accuracy": {}, "decisions": {}, "flagged": {}}
        for wl in window_lengths:
            key = _wl_key(wl)
            n = sum(d.n_decisions for _, d in res.decisions[wl])
            c = sum(d.n_correct for _, d in res.decisions[wl])
            und = sum(d.n_undecidable for _, d in res.decisions[wl])
            entry["accuracy"][key] = {**_threshold_entry(c, n, alpha, overlap), "n_undecidable": und}
            entry["flagged"][key] = n == 0
            entry["decisions"][key] = [
                {"trial": list(tk), "n_undecidable": d.n_undecidable,
                 "records": [{"window_index": r.window_index, "rho1": r.rho1, "rho2": r.rho2,
                              "decided": r.decided, "truth": r.truth, "correct": r.correct,
                              "tie": r.tie} for r in d.records]}
                for tk, d in res.decisions[wl]]
            if n == 0:
                log.warning("fold %d has no decidable %s s windows; excluded", f.index, wl)
                continue
            for tk, d in res.decisions[wl]:
                sid, cond, _ = tk
                for acc in (subj.setdefault((key, sid), [0, 0]),
                            subj_cond.setdefault((key, sid, cond), [0, 0])):
                    acc[0] += d.n_correct
                    acc[1] += d.n_decisions
        folds.append(entry)

    per_subject, per_subject_condition, mean, condition_mean = {}, {}, {}, {}
    for wl in window_lengths:
        key = _wl_key(wl)
        ps = {sid: _threshold_entry(c, n, alpha, overlap)
              for (k, sid), (c, n) in sorted(subj.items()) if k == key}
        psc: Dict[str, Dict[str, dict]] = {}
        for (k, sid, cond), (c, n) in sorted(subj_cond.items()):
            if k == key:
                psc.setdefault(sid, {})[cond] = _threshold_entry(c, n, alpha, overlap)
        per_subject[key] = ps
        per_subject_condition[key] = psc
        mean[key] = _mean_entry(list(ps.values()), alpha, overlap)
        condition_mean[key] = {
            cond: _mean_entry([psc[s][cond] for s in psc if cond in psc[s]], alpha, overlap)
            for cond in conditions
            if any(cond in psc[s] for s in psc)}
    return EvaluationReport(protocol.value, [float(w) for w in window_lengths], folds, per_subject,
                            per_subject_condition, mean, condition_mean, plan.skipped, provenance)


def _dataset_fingerprint(ds: Dataset) -> dict:
    return {"name": ds.name, "fs": ds.fs, "n_channels": ds.n_channels,
            "completeness": ds.completeness(),
            "seed": ds.metadata.get("synthetic_config", {}).get("seed")}


def _provenance(protocol: Protocol, datasets, window_lengths, cfg: DecoderConfig, alpha, overlap,
                drop_partial) -> dict:
    config = {"protocol": protocol.value, "window_lengths": [float(w) for w in window_lengths],
              "decoder": cfg.to_dict(), "alpha": alpha, "overlap": overlap,
              "drop_partial": drop_partial,
              "datasets": [_dataset_fingerprint(d) for d in datasets]}
    digest = hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()
    return {**config, "config_hash": digest}


def run_protocol(dataset: Dataset, protocol, window_lengths: Sequence[float] = DEFAULT_WINDOW_LENGTHS,
                 decoder: DecoderConfig = DecoderConfig(), jobs: int = 1, alpha: float = 0.05,
                 overlap: float = 0.0, drop_partial: bool = True) -> EvaluationReport:
    """Run one cross-validation protocol over ``dataset``.

    Results do not depend on ``jobs``: statistics are pooled in a fixed order.
    """
    protocol = Protocol.parse(protocol)
    plan = plan_folds(dataset, protocol)
    results = _execute(dataset, dataset, plan, window_lengths, decoder, jobs, overlap, drop_partial)
    prov = _provenance(protocol, [dataset], window_lengths, decoder, alpha, overlap, drop_partial)
    return _build_report(protocol, results, window_lengths, plan, alpha, overlap, prov,
                         [c.value for c in dataset.conditions])


def cross_dataset(train: Dataset, test: Dataset,
                  window_lengths: Sequence[float] = DEFAULT_WINDOW_LENGTHS,
                  decoder: DecoderConfig = DecoderConfig(), jobs: int = 1, alpha: float = 0.05,
                  overlap: float = 0.0, drop_partial: bool = True) -> EvaluationReport:
    """Train one decoder on every trial of ``train``; evaluate it on every trial of ``test``."""
    if train.n_channels is None or train.n_channels != test.n_channels:
        raise CompatibilityError(
            f"channel counts differ: train {train.n_channels}, test {test.n_channels}")
    if train.fs is None or test.fs is None or not np.isclose(train.fs, test.fs):
        raise CompatibilityError(f"sampling rates differ: train {train.fs}, test {test.fs}")
    train_keys = tuple(t.key for t in train.trials())
    test_keys = tuple(t.key for t in test.trials())
    if not train_keys or not test_keys:
        raise PlanError("both datasets need at least one trial")
    plan = FoldPlan(Protocol.CrossDataset, [Fold(0, train_keys, test_keys)])
    results = _execute(train, test, plan, window_lengths, decoder, jobs, overlap, drop_partial,
                       check_disjoint=False)
    prov = _provenance(Protocol.CrossDataset, [train, test], window_lengths, decoder, alpha,
                       overlap, drop_partial)
    return _build_report(Protocol.CrossDataset, results, window_lengths, plan, alpha, overlap, prov,
                         [c.value for c in test.conditions])


def evaluate_decoder(model: DecoderModel, test: Dataset,
                     window_lengths: Sequence[float] = DEFAULT_WINDOW_LENGTHS,
                     alpha: float = 0.05, overlap: float = 0.0,
                     drop_partial: bool = True) -> EvaluationReport:
    """Score an already trained decoder (e.g. loaded from disk) on every trial of ``test``."""
    if model.n_channels is not None and model.n_channels != test.n_channels:
        raise CompatibilityError(
            f"decoder expects {model.n_channels} channels, dataset has {test.n_channels}")
    if model.fs is not None and (test.fs is None or not np.isclose(model.fs, test.fs)):
        raise CompatibilityError(f"decoder trained at {model.fs} Hz, dataset is at {test.fs} Hz")
    L = model.n_lags
    fold = Fold(0, (), tuple(t.key for t in test.trials()))
    decisions = _score(model, list(test.trials()), window_lengths, L, overlap, drop_partial)
    plan = FoldPlan(Protocol.CrossDataset, [fold])
    cfg = DecoderConfig(tuple(model.lags_ms or (0.0, 1000.0 * (L - 1) / test.fs)), model.lam)
    prov = _provenance(Protocol.CrossDataset, [test], window_lengths, cfg, alpha, overlap,
                       drop_partial)
    return _build_report(Protocol.CrossDataset, [_FoldResult(fold, model.lam, decisions)],
                         window_lengths, plan, alpha, overlap, prov,
                         [c.value for c in test.conditions])
