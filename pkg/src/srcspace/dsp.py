"""Sensor preprocessing: zero-phase FIR filtering, resampling, standardisation, epoching.

Filters are linear-phase (type I) windowed-sinc FIRs applied forward and
backward. Because the kernels are symmetric, the forward-backward pass is
computed as one centred convolution with the kernel's autoconvolution.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.signal import fftconvolve, firwin, resample_poly

from .errors import EmptyResultError, InvalidConfigError, InvalidInputError
from .sim import SensorRecording, StimulusTrack

STD_FLOOR = 1e-12
PIPELINE_ORDER = ("bandpass", "notch", "resample", "standardize")
NOTCH_HALF_WIDTH_HZ = 2.0
NOTCH_TRANSITION_HZ = 3.0


@dataclass(frozen=True)
class FilterSpec:
    highpass_hz: float | None = 0.1
    lowpass_hz: float | None = 48.0
    notch_hz: float | None = None

    def validate(self, sampling_rate_hz: float):
        nyq = sampling_rate_hz / 2
        for name in ("highpass_hz", "lowpass_hz", "notch_hz"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise InvalidConfigError(f"{name} must be positive, got {v}")
        if self.highpass_hz is not None and self.lowpass_hz is not None and self.highpass_hz >= self.lowpass_hz:
            raise InvalidConfigError(f"highpass {self.highpass_hz} Hz must be below lowpass {self.lowpass_hz} Hz")
        if self.lowpass_hz is not None and self.lowpass_hz >= nyq:
            raise InvalidConfigError(f"lowpass {self.lowpass_hz} Hz must be below Nyquist ({nyq} Hz)")
        if self.highpass_hz is not None and self.highpass_hz >= nyq:
            raise InvalidConfigError(f"highpass {self.highpass_hz} Hz must be below Nyquist ({nyq} Hz)")
        if self.notch_hz is not None and self.notch_hz + NOTCH_HALF_WIDTH_HZ >= nyq:
            raise InvalidConfigError(f"notch {self.notch_hz} Hz too close to Nyquist ({nyq} Hz)")


def transition_width(cutoff_hz: float, highpass: bool) -> float:
    tw = 0.25 * cutoff_hz
    return max(tw, 0.05) if highpass else tw


def _numtaps(fs, tw):
    # Hamming window main-lobe rule
    n = int(np.ceil(3.3 * fs / tw))
    return n + 1 if n % 2 == 0 else n


def design_lowpass(cutoff_hz, fs):
    return firwin(_numtaps(fs, transition_width(cutoff_hz, False)), cutoff_hz, fs=fs, window="hamming")


def design_highpass(cutoff_hz, fs):
    return firwin(_numtaps(fs, transition_width(cutoff_hz, True)), cutoff_hz, fs=fs,
                  window="hamming", pass_zero=False)


def design_notch(freq_hz, fs):
    edges = [freq_hz - NOTCH_HALF_WIDTH_HZ, freq_hz + NOTCH_HALF_WIDTH_HZ]
    return firwin(_numtaps(fs, NOTCH_TRANSITION_HZ), edges, fs=fs, window="hamming")


def zero_phase_kernel(*kernels):
    """Autoconvolution of the cascade: the effective kernel of a forward-backward pass."""
    h = np.array([1.0])
    for k in kernels:
        h = np.convolve(h, k)
    return np.convolve(h, h[::-1])


def apply_zero_phase(data: np.ndarray, *kernels, chunk: int = 32) -> np.ndarray:
    """Filter along the last axis with reflect padding of one filter length per side."""
    h = zero_phase_kernel(*kernels)
    x = np.atleast_2d(np.asarray(data, dtype=float))
    pad = max(len(k) for k in kernels)
    n = x.shape[-1]
    out = np.empty_like(x)
    for start in range(0, x.shape[0], chunk):
        xp = np.pad(x[start:start + chunk], ((0, 0), (pad, pad)), mode="reflect")
        y = fftconvolve(xp, h[None, :], mode="same", axes=-1)
        out[start:start + chunk] = y[:, pad:pad + n]
    return out.reshape(np.shape(data))


def bandpass_filter(rec: SensorRecording, spec: FilterSpec) -> SensorRecording:
    fs = rec.sampling_rate_hz
    spec.validate(fs)
    kernels = []
    if spec.highpass_hz is not None:
        kernels.append(design_highpass(spec.highpass_hz, fs))
    if spec.lowpass_hz is not None:
        kernels.append(design_lowpass(spec.lowpass_hz, fs))
    if not kernels or rec.n_samples == 0:
        return rec
    return rec.replace(data=apply_zero_phase(rec.data, *kernels))


def notch_filter(rec: SensorRecording, freq_hz: float | None) -> SensorRecording:
    """Band-stop around ``freq_hz``; ``None`` or ``False`` leaves the recording untouched."""
    if freq_hz is None or freq_hz is False:
        return rec
    FilterSpec(highpass_hz=None, lowpass_hz=None, notch_hz=freq_hz).validate(rec.sampling_rate_hz)
    if rec.n_samples == 0:
        return rec
    return rec.replace(data=apply_zero_phase(rec.data, design_notch(freq_hz, rec.sampling_rate_hz)))


def _majority_labels(labels, n_out, ratio):
    """Majority vote of input labels in a window centred on each output sample."""
    lab = labels.astype(float)
    csum = np.concatenate([[0.0], np.cumsum(lab)])
    centers = np.arange(n_out) * ratio
    lo = np.clip(np.floor(centers - ratio / 2).astype(int), 0, len(lab))
    hi = np.clip(np.floor(centers + ratio / 2).astype(int), 0, len(lab))
    hi = np.maximum(hi, np.minimum(lo + 1, len(lab)))
    frac = (csum[hi] - csum[lo]) / np.maximum(hi - lo, 1)
    return (frac >= 0.5).astype(labels.dtype)


def resample(rec: SensorRecording, target_hz: float) -> SensorRecording:
    """Downsample with an anti-alias guard filter; labels by majority vote."""
    fs = rec.sampling_rate_hz
    if target_hz > fs:
        raise InvalidConfigError(f"target rate {target_hz} Hz exceeds current rate {fs} Hz")
    if target_hz <= 0:
        raise InvalidConfigError("target rate must be positive")
    if target_hz == fs:
        return rec
    n_out = int(round(rec.n_samples * target_hz / fs))
    ratio = fs / target_hz
    guard = design_lowpass(0.45 * target_hz, fs)
    x = apply_zero_phase(rec.data, guard) if rec.n_samples else rec.data
    frac = Fraction(target_hz / fs).limit_denominator(1000)
    if frac.numerator == 1:
        y = x[:, ::frac.denominator]
    else:
        y = resample_poly(x, frac.numerator, frac.denominator, axis=1)
    if y.shape[1] < n_out:
        y = np.pad(y, ((0, 0), (0, n_out - y.shape[1])), mode="edge")
    y = y[:, :n_out]
    labels = _majority_labels(rec.stimulus.labels, n_out, ratio)
    stim = StimulusTrack(labels=labels, sampling_rate_hz=float(target_hz))
    return rec.replace(data=np.ascontiguousarray(y), sampling_rate_hz=float(target_hz), stimulus=stim)


def standardize(data: np.ndarray, mean=None, std=None):
    """Per-channel z-scoring along the last axis; returns (data', mean, std).

    Pass ``mean``/``std`` to reuse statistics. Channels with std below
    ``STD_FLOOR`` are divided by 1, so constant channels become zeros.
    """
    x = np.asarray(data, dtype=float)
    if mean is None:
        if x.shape[-1] < 2:
            raise InvalidInputError("standardize needs at least 2 samples")
        mean = x.mean(axis=-1, keepdims=True)
        std = x.std(axis=-1, keepdims=True)
        std = np.where(std < STD_FLOOR, 1.0, std)
    return (x - mean) / std, mean, std


@dataclass(frozen=True)
class Evoked:
    data: np.ndarray
    times: np.ndarray
    n_epochs: int

    def gfp(self):
        """Global field power: RMS over channels per time point."""
        return np.sqrt(np.mean(self.data ** 2, axis=0))


def epoch_average(rec: SensorRecording, window_s=(-0.2, 0.6), data: np.ndarray | None = None) -> Evoked:
    """Average of windows aligned at each speech onset. ``window_s`` is (tmin, tmax) relative to onset."""
    fs = rec.sampling_rate_hz
    x = rec.data if data is None else data
    tmin, tmax = window_s
    i0, i1 = int(round(tmin * fs)), int(round(tmax * fs))
    onsets = [o for o in rec.stimulus.onsets if o + i0 >= 0 and o + i1 <= x.shape[-1]]
    if not onsets:
        raise EmptyResultError("no onsets with a full window inside the recording")
    acc = np.zeros(x.shape[:-1] + (i1 - i0,))
    for o in onsets:
        acc += x[..., o + i0:o + i1]
    return Evoked(data=acc / len(onsets), times=np.arange(i0, i1) / fs, n_epochs=len(onsets))


def check_order(stages) -> None:
    """Reject stage sequences that do not follow bandpass -> notch -> resample -> standardize."""
    pos = []
    for s in stages:
        if s not in PIPELINE_ORDER:
            raise InvalidConfigError(f"unknown preprocessing stage {s!r}; valid: {PIPELINE_ORDER}")
        pos.append(PIPELINE_ORDER.index(s))
    if pos != sorted(pos) or len(set(pos)) != len(pos):
        raise InvalidConfigError(f"stage order {tuple(stages)} violates the fixed order {PIPELINE_ORDER}")


def preprocess(rec: SensorRecording, spec: FilterSpec, resample_hz: float | None = 150.0,
               stages=PIPELINE_ORDER, standardize_output: bool = True):
    """Run the sensor pipeline. Returns (recording, stats) where stats holds standardisation mean/std."""
    stages = tuple(stages)
    check_order(stages)
    stats = None
    for s in stages:
        if s == "bandpass":
            rec = bandpass_filter(rec, FilterSpec(spec.highpass_hz, spec.lowpass_hz, None))
        elif s == "notch":
            rec = notch_filter(rec, spec.notch_hz)
        elif s == "resample" and resample_hz is not None:
            rec = resample(rec, resample_hz)
        elif s == "standardize" and standardize_output:
            z, mean, std = standardize(rec.data)
            rec = rec.replace(data=z)
            stats = (mean, std)
    return rec, stats
