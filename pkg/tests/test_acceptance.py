"""Acceptance gate: one PASS/FAIL line per criterion, printed in the terminal summary.

Each criterion runs inside ``criterion(...)``, which times it, records the
outcome and re-raises failures so pytest reports them as well.
"""
import contextlib
import json
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import (
    binomial_threshold_exact,
    gauss_solve,
    hankel_loop,
    ledoit_wolf_direct,
    matmul_loop,
    polyval_response,
    reconstruct_loop,
)
from stimdecode.cli import main
from stimdecode.dataset import SyntheticConfig, generate_synthetic, load_dataset
from stimdecode.decision import chance_band, significance_threshold
from stimdecode.decoder import DecoderModel, accumulate_statistics, build_lag_matrix, \
    ledoit_wolf_intensity, reconstruct, solve_decoder
from stimdecode.errors import SingularSystemError
from stimdecode.evaluation import Protocol, mismatched_envelopes, run_protocol
from stimdecode.signal import MultichannelSignal, design_butterworth_bandpass, filtfilt, \
    resample_rational

pytestmark = pytest.mark.acceptance

REAL_DATA_ENV = "STIMDECODE_AVGC_DATASET"


@contextlib.contextmanager
def criterion(name, budget_s=None):
    t0 = time.perf_counter()
    notes = []
    try:
        yield notes
        elapsed = time.perf_counter() - t0
        if budget_s is not None and elapsed > budget_s:
            raise AssertionError(f"took {elapsed:.1f} s, budget {budget_s} s")
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        if isinstance(exc, pytest.skip.Exception):
            ACCEPTANCE_LINES.append(f"SKIP  {name} ({exc})")
        else:
            first = (str(exc).splitlines() or [type(exc).__name__])[0][:120]
            ACCEPTANCE_LINES.append(f"FAIL  {name} [{elapsed:.1f} s] {first}")
        raise
    extra = f" {'; '.join(notes)}" if notes else ""
    ACCEPTANCE_LINES.append(f"PASS  {name} [{elapsed:.1f} s]{extra}")


# --------------------------------------------------------------------------- real data

def test_real_data_headline_accuracies():
    with criterion("real-data LOTO-CV / LOCO-CV 60 s accuracy (optional)", budget_s=1800) as notes:
        path = os.environ.get(REAL_DATA_ENV)
        if not path:
            pytest.skip(f"set {REAL_DATA_ENV} to a converted dataset directory")
        ds = load_dataset(path)
        loto = run_protocol(ds, Protocol.LOTO_AllConditions, (60.0,)).accuracy(60.0)
        loco = run_protocol(ds, Protocol.LOCO, (60.0,)).accuracy(60.0)
        notes.append(f"LOTO {100 * loto:.1f}%, LOCO {100 * loco:.1f}%")
        assert 0.845 <= loto <= 0.885, f"LOTO {loto:.4f} outside [0.845, 0.885]"
        assert 0.83 <= loco <= 0.87, f"LOCO {loco:.4f} outside [0.83, 0.87]"


# --------------------------------------------------------------------------- oracles

def _full_rank_instance(r):
    while True:
        C, L = int(r.integers(1, 4)), int(r.integers(1, 4))
        T = int(r.integers(max(C * L + 1, L), 13))
        x = r.integers(-9, 10, size=(T, C)).astype(float)
        s = r.integers(-9, 10, size=T).astype(float)
        X = build_lag_matrix(x, L)
        R = matmul_loop(X.data.T, X.data)
        rhs = [row[0] for row in matmul_loop(X.data.T, s[:, None])]
        try:
            d_exact = gauss_solve(R, rhs)
        except ZeroDivisionError:
            continue
        return x, s, L, X, np.array([float(v) for v in d_exact])


def test_oracle_equivalence():
    with criterion("oracle equivalence: solve / lag matrix / reconstruct", budget_s=5) as notes:
        r = np.random.default_rng(20240501)
        n_solved = 0
        for _ in range(120):
            x, s, L, X, d_ref = _full_rank_instance(r)
            np.testing.assert_array_equal(X.data, hankel_loop(x, L))
            R, rx = accumulate_statistics(X, s)
            try:
                d = solve_decoder(R, rx, 0.0, X.n_samples).d
            except SingularSystemError:
                # exactly invertible but numerically singular in float64; not a mismatch
                continue
            np.testing.assert_allclose(d, d_ref, rtol=1e-10, atol=1e-10 * np.abs(d_ref).max())
            n_solved += 1
            d_int = r.integers(-5, 6, size=X.data.shape[1]).astype(float)
            model = DecoderModel(d_int, R, rx, 0.0, 1.0, X.n_samples)
            np.testing.assert_array_equal(reconstruct(model, X), reconstruct_loop(x, d_int, L))
        assert n_solved >= 100, f"only {n_solved} instances solved"
        notes.append(f"{n_solved} instances")


# --------------------------------------------------------------------------- shrinkage

def test_shrinkage_properties():
    with criterion("shrinkage: range, direct-formula oracle, decreases with T", budget_s=30) as notes:
        r = np.random.default_rng(77)
        for _ in range(1000):
            T, p = int(r.integers(2, 40)), int(r.integers(1, 8))
            lam = ledoit_wolf_intensity(r.standard_normal((T, p)) * r.uniform(0.1, 10, p))
            assert 0.0 <= lam <= 1.0
        for _ in range(200):
            T, p = int(r.integers(2, 9)), int(r.integers(1, 5))
            X = r.integers(-6, 7, size=(T, p)).astype(float)
            if not X.any():
                continue
            assert abs(ledoit_wolf_intensity(X) - ledoit_wolf_direct(X)) <= 1e-12
        small, big = [], []
        for seed in range(50):
            g = np.random.default_rng(seed)
            small.append(ledoit_wolf_intensity(g.standard_normal((120, 18))))
            big.append(ledoit_wolf_intensity(g.standard_normal((12000, 18))))
        m_small, m_big = float(np.median(small)), float(np.median(big))
        notes.append(f"median lambda T=120 {m_small:.4f}, T=12000 {m_big:.4f}")
        assert m_big < m_small, (
            f"median lambda(T=12000) = {m_big:.4f} is not below median lambda(T=120) = "
            f"{m_small:.4f} on white data")


# --------------------------------------------------------------------------- DSP

def test_dsp_contracts():
    with criterion("DSP contracts: bandpass, zero-phase filtfilt, 128->20 Hz resampler",
                   budget_s=10):
        fs = 128.0
        band = design_butterworth_bandpass(4, 1.0, 9.0, fs)
        assert np.all(np.abs(band.poles()) < 1)
        assert polyval_response(band.b, band.a, 4.5, fs) >= 0.95
        assert polyval_response(band.b, band.a, 0.1, fs) <= 0.05
        for edge in (1.0, 9.0):
            f = np.linspace(0.9 * edge, 1.1 * edge, 2001)
            h = np.array([polyval_response(band.b, band.a, v, fs) for v in f])
            assert abs(f[np.argmin(np.abs(h - 2 ** -0.5))] - edge) <= 0.02 * edge
        n = 4096
        mid = slice(1024, n - 1024)
        for f0 in (2.0, 3.0, 5.0, 6.5, 8.0):
            x = np.sin(2 * np.pi * f0 * np.arange(n) / fs)
            y = filtfilt(band, MultichannelSignal(x, fs)).samples[:, 0]
            half = int(fs / f0) // 2 - 1  # stay within half a period of lag 0
            lags = np.arange(-half, half + 1)
            xc = [np.dot(y[mid], np.roll(x, k)[mid]) for k in lags]
            assert lags[int(np.argmax(xc))] == 0, f"{f0} Hz peak off lag 0"
            gain = polyval_response(band.b, band.a, f0, fs) ** 2
            assert abs(np.abs(y[mid]).max() - gain) <= 5e-3
            if f0 == 5.0:
                assert 0.9 <= np.abs(y[mid]).max() <= 1.0
        y30 = filtfilt(band, MultichannelSignal(np.sin(2 * np.pi * 30 * np.arange(n) / fs), fs))
        assert np.abs(y30.samples[mid]).max() <= 0.05
        out = resample_rational(MultichannelSignal(np.zeros((76800, 2)), fs), 5, 32)
        assert out.n_samples == 12000 and out.fs == 20.0
        sine = resample_rational(
            MultichannelSignal(np.sin(2 * np.pi * 3 * np.arange(76800) / fs), fs), 5, 32)
        ref = np.sin(2 * np.pi * 3 * np.arange(12000) / 20.0)
        assert np.abs(sine.samples[200:-200, 0] - ref[200:-200]).max() <= 0.02


# --------------------------------------------------------------------------- statistics

def test_binomial_thresholds_exact():
    with criterion("significance_threshold equals exact summation, n in [1, 500]", budget_s=5):
        for alpha in (0.05, 0.01):
            for n in range(1, 501):
                k = binomial_threshold_exact(n, alpha)
                assert significance_threshold(n, alpha) == k / n, f"n={n}, alpha={alpha}"


# --------------------------------------------------------------------------- benchmark

BENCH = SyntheticConfig(n_subjects=13, trials_per_condition=2, duration_s=600.0, n_channels=16,
                        snr_db=-5.0, unattended_leak_db=-6.0, seed=2024, family_seed=7,
                        name="benchmark")
WLS = (5.0, 10.0, 30.0, 60.0)


@pytest.fixture(scope="module")
def benchmark():
    t0 = time.perf_counter()
    ds = generate_synthetic(BENCH)
    per_condition = run_protocol(ds, Protocol.LOTO_PerCondition, WLS)
    across = run_protocol(ds, Protocol.LOTO_AllConditions, WLS)
    control = run_protocol(mismatched_envelopes(ds, seed=1), Protocol.LOTO_PerCondition, WLS)
    return ds, per_condition, across, control, time.perf_counter() - t0


def test_end_to_end_benchmark(benchmark):
    with criterion("synthetic benchmark: per-condition significance, pooling, control") as notes:
        ds, per_condition, across, control, elapsed = benchmark
        assert elapsed <= 600, f"benchmark took {elapsed:.0f} s"
        cm = per_condition.condition_mean["60.0"]
        assert set(cm) == {c.value for c in ds.conditions}
        for cond, e in cm.items():
            assert e["accuracy"] > e["threshold"], f"{cond}: {e['accuracy']} <= {e['threshold']}"
        pc, ac = per_condition.accuracy(60.0), across.accuracy(60.0)
        assert ac >= pc - 0.02, f"across-condition {ac:.4f} < per-condition {pc:.4f} - 0.02"
        for wl in WLS:
            key = repr(wl)
            n = sum(e["n_decisions"] for e in control.per_subject[key].values())
            lo, hi = chance_band(n, 0.99)
            acc = control.accuracy(wl)
            assert lo <= acc <= hi, f"control {acc:.4f} outside [{lo:.4f}, {hi:.4f}] at {wl} s"
        notes.append(f"60 s: per-condition {100 * pc:.1f}%, across {100 * ac:.1f}%, "
                     f"control {100 * control.accuracy(60.0):.1f}%; {elapsed:.0f} s")


def test_monotone_in_window_length(benchmark):
    with criterion("accuracy non-decreasing in window length (2-point steps)") as notes:
        _, per_condition, across, _, _ = benchmark
        for report in (per_condition, across):
            acc = [report.accuracy(w) for w in WLS]
            notes.append(f"{report.protocol}: " + ", ".join(f"{100 * a:.1f}" for a in acc))
            for (w0, a0), (w1, a1) in zip(zip(WLS, acc), zip(WLS[1:], acc[1:])):
                assert a1 >= a0 - 0.02, f"{w1} s ({a1:.4f}) below {w0} s ({a0:.4f}) - 0.02"


# --------------------------------------------------------------------------- reproducibility

def test_snapshot_rerun_is_byte_identical(tmp_path):
    with criterion("CLI rerun from config snapshot gives byte-identical report.json"):
        assert main(["synth", "--subjects", "3", "--channels", "8", "--duration-s", "120",
                     "--snr-db", "-10", "--seed", "9", "--out", str(tmp_path / "ds")]) == 0
        for protocol in ("loto-per-condition", "loto", "loco", "loso"):
            first, second = tmp_path / f"{protocol}-1", tmp_path / f"{protocol}-2"
            assert main(["evaluate", "--dataset", str(tmp_path / "ds"), "--protocol", protocol,
                         "--jobs", "1", "--out", str(first)]) == 0
            snap = json.loads((first / "config.json").read_text())
            assert snap["args"]["jobs"] == 1
            assert main(["evaluate", "--config", str(first / "config.json"),
                         "--out", str(second)]) == 0
            assert (first / "report.json").read_bytes() == (second / "report.json").read_bytes()
