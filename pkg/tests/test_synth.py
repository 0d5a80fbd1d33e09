import numpy as np
import pytest

from mcdtsf.data import Manifest, load_series, prepare
from mcdtsf.featenc import encode_timestamps
from mcdtsf.synth import SynthConfig, generate, number_words, season, write_dataset
from mcdtsf.textcond import load_documents


def _oracle_mse(series, oracle, horizon=6, start=36):
    err = [series.values[t + 1:t + 1 + horizon, 0] - oracle.predict(t, horizon)
           for t in range(start, len(series) - horizon)]
    return float(np.mean(np.square(err)))


def test_pure_noise_oracle_is_zero():
    cfg = SynthConfig(length=3000, seasonal_amplitude=0.0, text_shift=0.0, noise_std=0.5, seed=2)
    series, docs, oracle = generate(cfg)
    assert docs == []
    assert np.all(oracle.mean == 0)
    assert _oracle_mse(series, oracle) == pytest.approx(0.25, rel=0.1)


def test_oracle_mse_matches_noise_variance():
    cfg = SynthConfig(length=10_000, noise_std=0.1, seasonal_amplitude=1.0, text_shift=1.0, seed=0)
    series, _, oracle = generate(cfg)
    resid = series.values[:, 0] - oracle.mean
    assert np.mean(resid ** 2) == pytest.approx(0.01, rel=0.2)
    assert _oracle_mse(series, oracle) == pytest.approx(0.01, rel=0.2)


def test_no_text_shift_means_timestamp_determined():
    cfg = SynthConfig(length=600, text_shift=0.0, seed=3)
    series, docs, oracle = generate(cfg)
    assert docs == []
    expected = season(encode_timestamps(series.dates, series.frequency))
    np.testing.assert_allclose(oracle.mean, expected, atol=1e-12)


def test_determinism():
    a = generate(SynthConfig(length=400, seed=5))
    b = generate(SynthConfig(length=400, seed=5))
    c = generate(SynthConfig(length=400, seed=6))
    assert np.array_equal(a[0].values, b[0].values) and a[1] == b[1]
    assert not np.array_equal(a[0].values, c[0].values)


def test_events_are_announced_before_they_happen():
    cfg = SynthConfig(length=2000, seed=0, event_rate=0.1)
    series, docs, oracle = generate(cfg)
    level = np.round(oracle.mean - season(encode_timestamps(series.dates, series.frequency)), 9)
    changes = np.flatnonzero(np.diff(level) != 0) + 1
    assert len(changes) > 5
    assert np.all(np.diff(changes) >= cfg.lead)
    by_date = {d.start_date: d.report for d in docs}
    for t in changes:
        direction = "up" if level[t] > 0 else "down"
        for j in range(1, cfg.lead + 1):
            assert f"shift {direction} in {number_words(j)}" in by_date[series.dates[t - j]]
    # all remaining dates carry a status line
    assert len(docs) == len(series)
    assert sum("hold steady" in r for r in by_date.values()) == len(series) - cfg.lead * len(changes)


def test_status_reports_can_be_disabled():
    _, docs, _ = generate(SynthConfig(length=1000, seed=0, status_reports=False))
    assert docs and all("shift" in d.report for d in docs)


def test_text_blind_forecaster_cannot_reach_oracle():
    """A forecaster that knows the calendar and the current level but not the
    reports misses every announced shift; the gap is measured, not assumed."""
    gaps = {}
    for a_t in (0.0, 1.0):
        cfg = SynthConfig(length=6000, text_shift=a_t, noise_std=0.3, seed=1)
        series, _, oracle = generate(cfg)
        seasonal = season(encode_timestamps(series.dates, series.frequency))
        level = oracle.mean - seasonal
        blind, sharp = [], []
        for t in range(36, len(series) - 6):
            y = series.values[t + 1:t + 7, 0]
            blind.append(y - (seasonal[t + 1:t + 7] + level[t]))
            sharp.append(y - oracle.predict(t, 6))
        gaps[a_t] = float(np.mean(np.square(blind)) - np.mean(np.square(sharp)))
    assert gaps[0.0] == pytest.approx(0.0, abs=1e-12)
    assert gaps[1.0] > 0.05


def test_write_dataset_round_trip(tmp_path):
    cfg = SynthConfig(length=300, seed=4)
    manifest_path = write_dataset(cfg, tmp_path / "ds")
    manifest = Manifest.load(manifest_path)
    series = load_series(manifest.series, manifest.frequency)
    ref, docs, oracle = generate(cfg)
    np.testing.assert_allclose(series.values, ref.values, rtol=0, atol=1e-12)
    assert load_documents(manifest.text) == docs
    data = prepare(manifest, horizon=6)
    predict = oracle.predictor(series, data.stats)
    pred = predict(data.test, 0)
    assert pred.shape == tuple(data.test.y.shape)


def test_oracle_horizon_limit_and_validation():
    _, _, oracle = generate(SynthConfig(length=200, seed=0))
    with pytest.raises(ValueError):
        oracle.predict(50, oracle.lead + 1)
    for bad in ({"noise_std": 0.0}, {"text_shift": -1.0}, {"event_rate": 1.5}):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def test_number_words():
    assert number_words(1) == "one"
    assert number_words(6) == "six"
