import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from srcspace import dsp, sim
from srcspace.errors import InvalidConfigError, InvalidInputError


def _rec(data, fs, labels=None):
    data = np.atleast_2d(np.asarray(data, float))
    n_ch, n = data.shape
    labels = np.zeros(n, np.int8) if labels is None else labels
    arr = sim.SensorArray(np.tile([0, 0, 100.0], (n_ch, 1)), np.tile([0, 0, 1.0], (n_ch, 1)), "t")
    return sim.SensorRecording(data, float(fs), sim.StimulusTrack(labels, float(fs)), arr)


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def _tone(freq, fs, seconds=10.0, n_ch=2):
    t = np.arange(int(fs * seconds)) / fs
    return np.tile(np.sin(2 * np.pi * freq * t), (n_ch, 1))


def test_lowpass_rejects_60hz_and_passes_10hz():
    fs = 600.0
    spec = dsp.FilterSpec(highpass_hz=None, lowpass_hz=48.0)
    hi = dsp.bandpass_filter(_rec(_tone(60, fs), fs), spec).data
    lo = dsp.bandpass_filter(_rec(_tone(10, fs), fs), spec).data
    core = slice(600, -600)
    assert _rms(hi[:, core]) <= 0.1 * _rms(_tone(60, fs)[:, core])
    assert abs(_rms(lo[:, core]) / _rms(_tone(10, fs)[:, core]) - 1) < 0.1


def test_highpass_removes_offset():
    fs = 200.0
    x = _tone(5, fs, 20.0) + 3.0
    y = dsp.bandpass_filter(_rec(x, fs), dsp.FilterSpec(1.0, None)).data
    assert abs(y[:, 400:-400].mean()) < 0.05


def test_zero_phase_has_no_lag():
    fs = 300.0
    x = _tone(8, fs, 6.0, 1)
    y = dsp.apply_zero_phase(x, dsp.design_lowpass(40.0, fs))
    lags = np.arange(-10, 11)
    core = slice(300, -300)
    xc = [np.dot(np.roll(y[0], k)[core], x[0][core]) for k in lags]
    assert lags[int(np.argmax(xc))] == 0


def test_notch_removes_line_frequency():
    fs = 600.0
    x = _tone(50, fs) + _tone(10, fs)
    y = dsp.notch_filter(_rec(x, fs), 50.0).data
    spec = np.abs(np.fft.rfft(y[0, 600:-600]))
    f = np.fft.rfftfreq(len(y[0, 600:-600]), 1 / fs)
    assert spec[np.argmin(np.abs(f - 50))] < 0.05 * spec[np.argmin(np.abs(f - 10))]
    rec = _rec(x, fs)
    assert dsp.notch_filter(rec, None) is rec
    assert dsp.notch_filter(rec, False) is rec


def test_resample_600_to_150():
    fs = 600.0
    x = _tone(7, fs, 8.0)
    labels = (np.arange(x.shape[1]) // 600 % 2).astype(np.int8)
    out = dsp.resample(_rec(x, fs, labels), 150.0)
    assert out.n_samples * 4 == x.shape[1]
    assert out.sampling_rate_hz == 150.0
    ref = _tone(7, 150.0, 8.0)
    assert np.corrcoef(out.data[0], ref[0])[0, 1] >= 0.99
    # majority vote agrees with plain decimation except at segment boundaries
    diff = np.flatnonzero(out.stimulus.labels != labels[::4])
    edges = np.flatnonzero(np.diff(labels)) + 1
    assert all(np.min(np.abs(edges - 4 * d)) <= 2 for d in diff)


def test_resample_rejects_upsampling():
    with pytest.raises(InvalidConfigError):
        dsp.resample(_rec(np.zeros((1, 100)), 100.0), 200.0)


def test_resample_non_integer_ratio_length():
    out = dsp.resample(_rec(np.random.default_rng(0).normal(size=(2, 1000)), 300.0), 200.0)
    assert out.n_samples == round(1000 * 200 / 300)


@given(arrays(np.float64, (3, 50), elements=st.floats(-1e3, 1e3, allow_nan=False)))
@settings(max_examples=50, deadline=None)
def test_standardize_moments(x):
    z, mean, std = dsp.standardize(x)
    assert np.all(np.abs(z.mean(axis=1)) < 1e-9)
    live = x.std(axis=1) >= 1e-6
    assert np.all(np.abs(z[live].std(axis=1) - 1) < 1e-9)
    # reuse of statistics reproduces the same output
    z2, _, _ = dsp.standardize(x, mean, std)
    assert np.array_equal(z, z2)


def test_standardize_constant_channel_becomes_zero():
    x = np.vstack([np.full(10, 4.0), np.arange(10.0)])
    z, _, std = dsp.standardize(x)
    assert np.all(z[0] == 0.0)
    assert std[0, 0] == 1.0
    with pytest.raises(InvalidInputError):
        dsp.standardize(np.zeros((2, 1)))


def test_filter_spec_validation():
    with pytest.raises(InvalidConfigError):
        dsp.FilterSpec(10.0, 5.0).validate(100.0)
    with pytest.raises(InvalidConfigError):
        dsp.FilterSpec(None, 60.0).validate(100.0)
    with pytest.raises(InvalidConfigError):
        dsp.FilterSpec(-1.0, None).validate(100.0)


def test_stage_order_is_enforced():
    dsp.check_order(["bandpass", "resample"])
    with pytest.raises(InvalidConfigError):
        dsp.check_order(["resample", "bandpass"])
    with pytest.raises(InvalidConfigError):
        dsp.check_order(["bandpass", "bandpass"])
    with pytest.raises(InvalidConfigError):
        dsp.check_order(["smooth"])


def test_preprocess_pipeline_output():
    fs = 300.0
    rng = np.random.default_rng(0)
    rec = _rec(rng.normal(size=(4, 3000)), fs)
    out, stats = dsp.preprocess(rec, dsp.FilterSpec(0.1, 48.0), 150.0)
    assert out.n_samples == 1500 and out.sampling_rate_hz == 150.0
    assert np.all(np.abs(out.data.mean(axis=1)) < 1e-9)
    assert stats is not None
    raw, none = dsp.preprocess(rec, dsp.FilterSpec(0.1, 48.0), 150.0, standardize_output=False)
    assert none is None and not np.allclose(raw.data.std(axis=1), 1.0)


def test_epoch_average_recovers_locked_response():
    fs = 100.0
    n = 3000
    labels = np.zeros(n, np.int8)
    for on in range(100, n - 200, 300):
        labels[on:on + 150] = 1
    stim = sim.StimulusTrack(labels, fs)
    kernel = np.exp(-np.arange(40) / 10.0)
    x = np.zeros(n)
    x[stim.onsets] = 1.0
    x = np.convolve(x, kernel)[:n] + 0.01 * np.random.default_rng(0).normal(size=n)
    ev = dsp.epoch_average(_rec(x[None], fs, labels), window_s=(-0.2, 0.6))
    peak_t = ev.times[np.argmax(ev.data[0])]
    assert abs(peak_t) < 0.02
