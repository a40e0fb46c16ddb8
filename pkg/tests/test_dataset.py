import json
import logging

import numpy as np
import pytest

from stimdecode.dataset import (
    Condition,
    Dataset,
    SyntheticConfig,
    Trial,
    forward_eeg,
    generate_synthetic,
    load_dataset,
    preprocess_trial,
    save_dataset,
    validate_real_layout,
)
from stimdecode.decoder import AttentionLabels
from stimdecode.envelope import Envelope
from stimdecode.errors import (
    ConfigError,
    CorruptDatasetError,
    MissingFileError,
    SchemaError,
    ShapeError,
)
from stimdecode.signal import MultichannelSignal


def _trial(n=40, c=3, subject="S01", cond="NoVisuals", idx=1, fs=20.0, seed=0):
    r = np.random.default_rng(seed)
    return Trial(subject, cond, idx, MultichannelSignal(r.standard_normal((n, c)), fs),
                 Envelope(r.standard_normal(n), fs), Envelope(r.standard_normal(n), fs),
                 AttentionLabels.from_runs([(0, 1), (n // 2, 2)], n))


def _assert_same(a: Dataset, b: Dataset):
    assert a.name == b.name and list(a.subjects) == list(b.subjects)
    for ta, tb in zip(a.trials(), b.trials()):
        assert ta.key == tb.key
        assert ta.fs == tb.fs
        np.testing.assert_array_equal(ta.eeg.samples, tb.eeg.samples)
        np.testing.assert_array_equal(ta.s1.values, tb.s1.values)
        np.testing.assert_array_equal(ta.s2.values, tb.s2.values)
        np.testing.assert_array_equal(ta.labels.y, tb.labels.y)


class TestCondition:
    def test_four_conditions_one_congruent(self):
        assert len(Condition) == 4
        assert [c for c in Condition if c.congruent] == [Condition.StaticVideo]
        assert all(c.description for c in Condition)

    def test_unknown(self):
        with pytest.raises(SchemaError):
            Condition.parse("Podcast")


class TestTrial:
    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            Trial("S01", "NoVisuals", 1, MultichannelSignal(np.zeros((10, 2)), 20.0),
                  Envelope(np.ones(9), 20.0), Envelope(np.ones(10), 20.0),
                  AttentionLabels.constant(10))

    def test_real_layout(self):
        good = _trial(n=12000)
        validate_real_layout(good)
        with pytest.raises(SchemaError):
            validate_real_layout(_trial(n=11980))
        no_switch = Trial("S01", "NoVisuals", 1, good.eeg, good.s1, good.s2,
                          AttentionLabels.constant(12000))
        with pytest.raises(SchemaError):
            validate_real_layout(no_switch)


class TestContainer:
    def test_round_trip_is_bit_exact(self, tmp_path, small_dataset):
        save_dataset(small_dataset, tmp_path / "ds")
        back = load_dataset(tmp_path / "ds" / "manifest.json")
        _assert_same(small_dataset, back)
        assert back.completeness() == small_dataset.completeness()
        assert back.metadata == small_dataset.metadata

    def test_round_trip_keeps_channel_labels_and_metadata(self, tmp_path):
        t = _trial()
        t = Trial(t.subject, t.condition, t.trial,
                  MultichannelSignal(t.eeg.samples, t.fs, ["Fz", "Cz", "Pz"]),
                  t.s1, t.s2, t.labels, {"origin": "unit", "n": 3})
        save_dataset(Dataset("x", {"S01": [t]}), tmp_path)
        back = next(load_dataset(tmp_path).trials())
        assert list(back.eeg.channel_labels) == ["Fz", "Cz", "Pz"]
        assert back.metadata == {"origin": "unit", "n": 3}

    def test_truncated_blob(self, tmp_path):
        t = _trial(n=12000, c=1)
        save_dataset(Dataset("x", {"S01": [t]}), tmp_path)
        blob = tmp_path / "S01" / "NoVisuals_1_eeg.f64"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CorruptDatasetError, match="11999|95992"):
            load_dataset(tmp_path)

    def test_missing_blob(self, tmp_path):
        save_dataset(Dataset("x", {"S01": [_trial()]}), tmp_path)
        (tmp_path / "S01" / "NoVisuals_1_env.f64").unlink()
        with pytest.raises(MissingFileError):
            load_dataset(tmp_path)

    def test_unknown_condition_in_manifest(self, tmp_path):
        path = save_dataset(Dataset("x", {"S01": [_trial()]}), tmp_path)
        m = json.loads(path.read_text())
        m["subjects"][0]["trials"][0]["condition"] = "Podcast"
        path.write_text(json.dumps(m))
        with pytest.raises(SchemaError):
            load_dataset(path)

    def test_unknown_field_warns(self, tmp_path, caplog):
        path = save_dataset(Dataset("x", {"S01": [_trial()]}), tmp_path)
        m = json.loads(path.read_text())
        m["subjects"][0]["trials"][0]["gaze"] = "yes"
        path.write_text(json.dumps(m))
        with caplog.at_level(logging.WARNING):
            load_dataset(path)
        assert "gaze" in caplog.text

    def test_absent_cells(self, tmp_path):
        cfg = SyntheticConfig(n_subjects=2, duration_s=10.0, n_channels=2,
                              missing=((0, "MovingVideo", 2), (1, "NoVisuals", 1)))
        ds = generate_synthetic(cfg)
        save_dataset(ds, tmp_path)
        back = load_dataset(tmp_path)
        assert back.completeness()["S01"]["MovingVideo"] == [1]
        assert back.completeness()["S02"]["NoVisuals"] == [2]
        assert back.absent_cells() == [("S01", "MovingVideo", 2), ("S02", "NoVisuals", 1)]

    def test_empty_dataset(self, tmp_path):
        path = save_dataset(Dataset("empty"), tmp_path)
        back = load_dataset(path)
        assert back.subjects == {} and list(back.trials()) == []

    def test_refuses_overwrite(self, tmp_path):
        save_dataset(Dataset("a"), tmp_path)
        with pytest.raises(ConfigError):
            save_dataset(Dataset("b"), tmp_path)
        save_dataset(Dataset("b"), tmp_path, force=True)
        assert load_dataset(tmp_path).name == "b"

    def test_large_trial_blob_size(self, tmp_path):
        t = Trial("S01", "NoVisuals", 1, MultichannelSignal(np.zeros((12000, 64)), 20.0),
                  Envelope(np.zeros(12000), 20.0), Envelope(np.zeros(12000), 20.0),
                  AttentionLabels.constant(12000))
        save_dataset(Dataset("big", {"S01": [t]}), tmp_path)
        assert (tmp_path / "S01" / "NoVisuals_1_eeg.f64").stat().st_size == 12000 * 64 * 8

    def test_blob_layout_is_time_major_little_endian(self, tmp_path):
        t = _trial(n=5, c=2)
        save_dataset(Dataset("x", {"S01": [t]}), tmp_path)
        raw = np.frombuffer((tmp_path / "S01" / "NoVisuals_1_eeg.f64").read_bytes(), "<f8")
        np.testing.assert_array_equal(raw, t.eeg.samples.ravel(order="C"))
        m = json.loads((tmp_path / "manifest.json").read_text())
        assert m["subjects"][0]["trials"][0]["labels"] == [[0, 1], [2, 2]]


class TestSynthetic:
    def test_determinism(self, small_dataset):
        cfg = SyntheticConfig.from_dict(small_dataset.metadata["synthetic_config"])
        _assert_same(generate_synthetic(cfg), small_dataset)

    def test_seed_changes_data(self):
        a = generate_synthetic(SyntheticConfig(n_subjects=1, duration_s=10, n_channels=2, seed=1))
        b = generate_synthetic(SyntheticConfig(n_subjects=1, duration_s=10, n_channels=2, seed=2))
        assert not np.array_equal(next(a.trials()).eeg.samples, next(b.trials()).eeg.samples)

    def test_shape(self):
        cfg = SyntheticConfig(n_subjects=1, conditions=("NoVisuals",), trials_per_condition=1)
        t = next(generate_synthetic(cfg).trials())
        assert t.eeg.samples.shape == (12000, 16)
        assert t.s1.n_samples == t.s2.n_samples == 12000

    def test_one_switch_at_midpoint(self, small_dataset):
        for t in small_dataset.trials():
            assert t.labels.switch_points() == [t.n_samples // 2]

    def test_forward_model_is_causal(self):
        r = np.random.default_rng(8)
        n, t0 = 400, 250
        s, u = r.standard_normal(n), r.standard_normal(n)
        h, g = r.standard_normal((4, 9)), r.standard_normal((4, 9))
        base = sum(forward_eeg(s, u, h, g, 0.5))
        s_future = s.copy()
        s_future[t0 + 1:] += r.standard_normal(n - t0 - 1)
        moved = sum(forward_eeg(s_future, u, h, g, 0.5))
        np.testing.assert_array_equal(moved[:t0 + 1], base[:t0 + 1])
        assert not np.array_equal(moved[t0 + 1:], base[t0 + 1:])

    def test_forward_model_matches_convolution(self):
        r = np.random.default_rng(9)
        s, u = r.standard_normal(50), r.standard_normal(50)
        h, g = r.standard_normal((2, 4)), r.standard_normal((2, 4))
        att, un = forward_eeg(s, u, h, g, 0.3)
        for c in range(2):
            for t in range(50):
                ref = sum(h[c, l] * s[t - l] for l in range(4) if t - l >= 0)
                assert att[t, c] == pytest.approx(ref, abs=1e-12)
                ref = sum(g[c, l] * u[t - l] for l in range(4) if t - l >= 0)
                assert un[t, c] == pytest.approx(0.3 * ref, abs=1e-12)

    def test_snr_is_respected(self):
        # with no leak the noise-free part is the attended response; regenerate
        # at +inf to isolate it and compare powers before z-scoring rescales both
        kw = dict(n_subjects=1, conditions=("NoVisuals",), trials_per_condition=1,
                  duration_s=300.0, n_channels=4, unattended_leak_db=float("-inf"), seed=4)
        clean = next(generate_synthetic(SyntheticConfig(snr_db=float("inf"), **kw)).trials())
        noisy = next(generate_synthetic(SyntheticConfig(snr_db=0.0, **kw)).trials())
        # after z-scoring, the clean share of the noisy EEG explains half its power
        rho = [np.corrcoef(clean.eeg.samples[:, c], noisy.eeg.samples[:, c])[0, 1]
               for c in range(4)]
        assert np.mean(np.square(rho)) == pytest.approx(0.5, abs=0.1)

    def test_config_round_trip_and_validation(self):
        cfg = SyntheticConfig(snr_db=float("inf"), unattended_leak_db=float("-inf"),
                              missing=((0, "NoVisuals", 1),))
        back = SyntheticConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg
        for bad in (dict(snr_db=float("nan")), dict(snr_db=float("-inf")), dict(seed=-1),
                    dict(seed=1.5), dict(n_channels=0), dict(envelope_band_hz=(1.0, 12.0))):
            with pytest.raises(ConfigError):
                generate_synthetic(SyntheticConfig(**bad))
        with pytest.raises(SchemaError):
            generate_synthetic(SyntheticConfig(conditions=("Podcast",)))


def test_preprocess_trial_maps_labels_to_new_rate():
    r = np.random.default_rng(3)
    n = 128 * 60
    t = Trial("S01", "NoVisuals", 1, MultichannelSignal(r.standard_normal((n, 4)), 128.0),
              Envelope(np.abs(r.standard_normal(n)), 128.0),
              Envelope(np.abs(r.standard_normal(n)), 128.0),
              AttentionLabels.from_runs([(0, 2), (n // 2, 1)], n))
    out = preprocess_trial(t)
    assert out.fs == 20.0 and out.n_samples == 1200
    assert out.labels.runs() == [(0, 2), (600, 1)]
    assert out.metadata["preprocessing"]["original_fs"] == 128.0
