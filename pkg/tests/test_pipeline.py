import json

import numpy as np
import pytest

from deaps.io import read_manifest
from deaps.pipeline import (
    PIPELINE_HASH,
    SignalRecord,
    WindowSet,
    highpass,
    normalize,
    preprocess_manifest,
    preprocess_record,
    quality_filter,
    resample_to_100hz,
    windowize,
)
from deaps.synthgen import generate_dataset


def rec(x, fs=100.0):
    return SignalRecord(0, 0, fs, np.asarray(x, dtype=float))


def _steady_amplitude(x: np.ndarray) -> float:
    """Sine amplitude from the RMS of the middle half, away from edge effects."""
    n = x.size
    return np.sqrt(2.0 * np.mean(x[n // 4 : 3 * n // 4] ** 2))


def butter_hp_power_gain(f: float, fc: float = 0.5, order: int = 5, fs: float = 100.0) -> float:
    """|H(f)|^2 of a bilinear-transformed Butterworth high-pass (prewarped)."""
    wc = np.tan(np.pi * fc / fs)
    w = np.tan(np.pi * f / fs)
    return 1.0 / (1.0 + (wc / w) ** (2 * order))


def test_signal_record_validation():
    with pytest.raises(ValueError):
        rec([1.0, np.nan])
    with pytest.raises(ValueError):
        rec([1.0, 2.0], fs=0)


def test_resample_identity():
    x = np.random.default_rng(0).standard_normal(1234)
    out = resample_to_100hz(rec(x))
    assert out.fs == 100
    np.testing.assert_allclose(out.samples, x, atol=1e-9)


def test_resample_length():
    out = resample_to_100hz(rec(np.zeros(2000), fs=200))
    assert out.samples.size == 1000
    assert out.fs == 100


@pytest.mark.parametrize("fs", [125.0, 250.0, 360.0])
def test_resample_preserves_duration(fs):
    n = int(fs * 37)
    out = resample_to_100hz(rec(np.zeros(n), fs=fs))
    assert abs(out.samples.size - n * 100 / fs) <= 1


def test_resample_sine_amplitude():
    t = np.arange(4000) / 200.0
    out = resample_to_100hz(rec(np.sin(2 * np.pi * 5 * t), fs=200))
    t2 = np.arange(out.samples.size) / 100.0
    expected = np.sin(2 * np.pi * 5 * t2)
    mid = slice(100, -100)
    assert abs(_steady_amplitude(out.samples) - 1.0) < 0.01
    np.testing.assert_allclose(out.samples[mid], expected[mid], atol=0.01)


def test_resample_rejects_low_rate():
    with pytest.raises(ValueError):
        resample_to_100hz(rec(np.zeros(100), fs=40))


def test_highpass_constant():
    out = highpass(rec(np.full(3000, 4.2)))
    assert np.max(np.abs(out.samples)) < 1e-6


def test_highpass_requires_100hz():
    with pytest.raises(ValueError):
        highpass(rec(np.zeros(3000), fs=200))


def test_highpass_low_frequency_attenuated():
    t = np.arange(60000) / 100.0
    out = highpass(rec(np.sin(2 * np.pi * 0.1 * t)))
    expected_gain = butter_hp_power_gain(0.1)  # squared by the forward-backward pass
    measured = _steady_amplitude(out.samples)
    assert 20 * np.log10(expected_gain) < -20
    assert 20 * np.log10(measured) < -20


def test_highpass_passband_preserved():
    t = np.arange(6000) / 100.0
    out = highpass(rec(np.sin(2 * np.pi * 10 * t)))
    expected = butter_hp_power_gain(10.0)
    assert abs(expected - 1.0) < 0.02
    assert abs(_steady_amplitude(out.samples) - 1.0) < 0.02


def test_highpass_zero_phase():
    t = np.arange(6000) / 100.0
    x = np.sin(2 * np.pi * 3 * t)
    out = highpass(rec(x))
    lag = np.argmax(np.correlate(out.samples[1000:5000], x[1000:5000], "full")) - 3999
    assert lag == 0


def test_normalize_unit_std():
    x = np.random.default_rng(1).standard_normal(5000) * 3 + 2
    out = normalize(rec(x)).samples
    assert abs(out.std(ddof=1) - 1) < 1e-6
    assert abs(out.mean()) < 1e-9


def test_normalize_scale_invariant():
    x = np.random.default_rng(2).standard_normal(3000)
    np.testing.assert_allclose(normalize(rec(7 * x)).samples, normalize(rec(x)).samples, atol=1e-12)


def test_normalize_hand_zscore():
    x = np.arange(1, 101, dtype=float)
    mean = sum(x) / len(x)
    sd = (sum((v - mean) ** 2 for v in x) / (len(x) - 1)) ** 0.5
    np.testing.assert_allclose(normalize(rec(x)).samples, (x - mean) / sd, atol=1e-12)


def test_normalize_rejects_constant():
    with pytest.raises(ValueError):
        normalize(rec(np.ones(100)))


def test_windowize_counts():
    assert len(windowize(rec(np.zeros(3500)))) == 3
    with pytest.raises(ValueError):
        windowize(rec(np.zeros(999)))


def test_windowize_single_window_identity():
    x = np.random.default_rng(0).standard_normal(1000)
    ws = windowize(rec(x))
    np.testing.assert_array_equal(ws.windows[0], x)
    assert ws.start_times_s.tolist() == [0.0]


def test_windowize_slices():
    x = np.random.default_rng(3).standard_normal(4321)
    ws = windowize(rec(x))
    for k in range(len(ws)):
        np.testing.assert_array_equal(ws.windows[k], x[1000 * k : 1000 * (k + 1)])
        assert ws.start_times_s[k] == 10 * k


def _ws(windows):
    windows = np.asarray(windows, dtype=float)
    return WindowSet(windows, np.arange(len(windows)) * 10.0)


def test_quality_drops_flatline():
    clean = np.random.default_rng(0).standard_normal(1000)
    out = quality_filter(_ws([np.zeros(1000), clean]))
    assert len(out) == 1
    np.testing.assert_array_equal(out.windows[0], clean)


def test_quality_drops_clipped():
    rng = np.random.default_rng(0)
    w = np.clip(rng.standard_normal(1000), -3, 3)
    w[:100] = 3.0  # 10% saturated at the record maximum
    clean = np.clip(rng.standard_normal(1000), -2.9, 2.9)
    assert (np.isclose(w, 3.0).mean()) >= 0.05
    out = quality_filter(_ws([w, clean]), record_min=-3.0, record_max=3.0)
    assert len(out) == 1
    np.testing.assert_array_equal(out.windows[0], clean)


def test_quality_keeps_clean_synthetic(tmp_path):
    manifest = generate_dataset(2, 2, 60, seed=0, out_dir=tmp_path)
    from deaps.pipeline import load_record, preprocess_windows

    for row in read_manifest(manifest):
        r = load_record(row.path)
        ws = preprocess_windows(r)
        assert len(ws) == 6


def test_pipeline_idempotent():
    # in-band content on a 30 min record; the first/last 10 s carry filter transients
    t = np.arange(180000) / 100.0
    x = sum(np.sin(2 * np.pi * f * t + f) for f in (2.0, 5.0, 7.3, 11.0, 19.0))
    once = normalize(highpass(rec(x)))
    twice = normalize(highpass(once))
    d = (once.samples - twice.samples)[1000:-1000]
    assert np.sqrt(np.mean(d**2)) < 1e-4


def test_pipeline_refilter_bounded():
    """Broadband input: a second pass only re-attenuates the transition band."""
    x = np.random.default_rng(5).standard_normal(20000).cumsum() * 0.01 + np.sin(np.arange(20000) / 3)
    once = normalize(highpass(rec(x)))
    twice = normalize(highpass(once))
    assert np.sqrt(np.mean((once.samples - twice.samples) ** 2)) < 0.02


def test_preprocess_order_matches_manual():
    x = np.random.default_rng(6).standard_normal(24000)
    r = rec(x, fs=200)
    manual = normalize(highpass(resample_to_100hz(r)))
    np.testing.assert_allclose(preprocess_record(r).samples, manual.samples)


def test_preprocess_manifest(tmp_path):
    raw = generate_dataset(2, 2, 60, seed=0, out_dir=tmp_path / "raw")
    out = preprocess_manifest(raw, tmp_path / "proc")
    rows = read_manifest(out)
    assert len(rows) == 4
    for row in rows:
        meta = json.loads(row.path.with_suffix(".json").read_text())
        x = np.fromfile(row.path, dtype="<f4")
        assert meta["fs"] == 100
        assert meta["pipeline_hash"] == PIPELINE_HASH
        assert meta["kept_windows"] == list(range(6))
        assert abs(x.astype(float).std(ddof=1) - 1) < 1e-5
