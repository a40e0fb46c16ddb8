"""Multichannel signal container and the DSP primitives used in preprocessing.

Signals are stored time-major, ``samples[t, c]``, in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from math import gcd
from typing import Optional, Sequence

import numpy as np
from scipy import signal as sps

from .errors import (
    ConfigError,
    InsufficientLengthError,
    InvalidBandError,
    InvalidOrderError,
    InvalidRatioError,
    ShapeError,
    ZeroVarianceError,
)

__all__ = [
    "MultichannelSignal",
    "IIRFilterSpec",
    "design_butterworth_bandpass",
    "filtfilt",
    "resample_rational",
    "zscore_per_trial",
    "rational_ratio",
    "preprocess",
]


@dataclass(frozen=True)
class MultichannelSignal:
    """Uniformly sampled multichannel time series.

    Parameters
    ----------
    samples : array_like
        Shape ``(n_samples, n_channels)``; a 1-D array is treated as one channel.
    fs : float
        Sampling rate in Hz.
    channel_labels : sequence of str, optional
    """

    samples: np.ndarray
    fs: float
    channel_labels: Optional[tuple] = None

    def __post_init__(self):
        x = np.array(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        if x.ndim != 2:
            raise ShapeError(f"samples must be 1-D or 2-D, got shape {x.shape}")
        if x.shape[0] < 1 or x.shape[1] < 1:
            raise ShapeError(f"empty signal of shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ShapeError("samples contain NaN or Inf")
        if not (np.isfinite(self.fs) and self.fs > 0):
            raise ConfigError(f"sampling rate must be positive, got {self.fs}")
        x.flags.writeable = False
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "fs", float(self.fs))
        if self.channel_labels is not None:
            labels = tuple(str(s) for s in self.channel_labels)
            if len(labels) != x.shape[1]:
                raise ShapeError(
                    f"{len(labels)} channel labels for {x.shape[1]} channels")
            object.__setattr__(self, "channel_labels", labels)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.fs

    def with_samples(self, samples, fs=None) -> "MultichannelSignal":
        """Copy of this signal with new samples (and optionally a new rate)."""
        return MultichannelSignal(samples, self.fs if fs is None else fs,
                                  self.channel_labels)


@dataclass(frozen=True)
class IIRFilterSpec:
    """A digital Butterworth bandpass designed for a specific sampling rate.

    ``b``/``a`` are the transfer-function coefficients (``a[0] == 1``); ``sos``
    holds the same filter as second-order sections, which is what gets applied.
    """

    order: int
    low_hz: float
    high_hz: float
    fs: float
    b: np.ndarray = field(repr=False)
    a: np.ndarray = field(repr=False)
    sos: np.ndarray = field(repr=False)
    kind: str = "butterworth-bandpass"

    @property
    def state_length(self) -> int:
        # the bandpass transform doubles the prototype order
        return 2 * self.order

    @property
    def padlen(self) -> int:
        return 3 * self.state_length

    def poles(self) -> np.ndarray:
        return np.roots(self.a)


def design_butterworth_bandpass(order: int, low_hz: float, high_hz: float,
                                fs: float) -> IIRFilterSpec:
    """Design a Butterworth bandpass by the prewarped bilinear transform.

    Parameters
    ----------
    order : int
        Order of the analog lowpass prototype; the bandpass has twice as many poles.
    low_hz, high_hz : float
        Band edges (-3 dB points) in Hz.
    fs : float
        Sampling rate the filter will be applied at.
    """
    if int(order) != order or order < 1:
        raise InvalidOrderError(f"filter order must be a positive integer, got {order}")
    if not (0 < low_hz < high_hz < fs / 2):
        raise InvalidBandError(
            f"band [{low_hz}, {high_hz}] Hz must satisfy 0 < low < high < fs/2 = {fs / 2}")
    order = int(order)
    sos = sps.butter(order, [low_hz, high_hz], btype="bandpass", output="sos", fs=fs)
    b, a = sps.sos2tf(sos)
    b = b / a[0]
    a = a / a[0]
    return IIRFilterSpec(order=order, low_hz=float(low_hz), high_hz=float(high_hz),
                         fs=float(fs), b=b, a=a, sos=sos)


def filtfilt(filt: IIRFilterSpec, sig: MultichannelSignal) -> MultichannelSignal:
    """Zero-phase forward-backward filtering of every channel.

    Edges are extended by odd reflection over ``3 * 2 * order`` samples.
    """
    if not np.isclose(filt.fs, sig.fs):
        raise ConfigError(f"filter designed for {filt.fs} Hz applied to a {sig.fs} Hz signal")
    if sig.n_samples <= filt.padlen:
        raise InsufficientLengthError(
            f"signal of {sig.n_samples} samples is too short for edge padding of "
            f"{filt.padlen} samples")
    y = sps.sosfiltfilt(filt.sos, sig.samples, axis=0, padtype="odd", padlen=filt.padlen)
    return sig.with_samples(y)


def rational_ratio(fs_in: float, fs_out: float, max_denominator: int = 10000):
    """Return ``(up, down)`` in lowest terms with ``fs_in * up / down == fs_out``."""
    r = Fraction(fs_out).limit_denominator(max_denominator) / \
        Fraction(fs_in).limit_denominator(max_denominator)
    return r.numerator, r.denominator


def _antialias_taps(up: int, down: int, atten_db: float = 80.0,
                    rel_width: float = 0.1) -> np.ndarray:
    # Kaiser-windowed sinc at the lower of the two Nyquist rates, expressed in
    # units of the upsampled Nyquist frequency.
    max_rate = max(up, down)
    cutoff = 1.0 / max_rate
    numtaps, beta = sps.kaiserord(atten_db, rel_width * cutoff)
    numtaps |= 1
    return sps.firwin(numtaps, cutoff, window=("kaiser", beta))


def resample_rational(sig: MultichannelSignal, up: int, down: int) -> MultichannelSignal:
    """Polyphase rational resampling by ``up / down``.

    The output has ``ceil(n_samples * up / down)`` samples at ``fs * up / down``.
    """
    if int(up) != up or int(down) != down or up < 1 or down < 1:
        raise InvalidRatioError(f"up and down must be positive integers, got {up}/{down}")
    up, down = int(up), int(down)
    g = gcd(up, down)
    up, down = up // g, down // g
    if up == down == 1:
        return sig
    taps = _antialias_taps(up, down)
    y = sps.resample_poly(sig.samples, up, down, axis=0, window=taps)
    return sig.with_samples(y, fs=sig.fs * up / down)


def zscore_per_trial(sig: MultichannelSignal, reference_scale=None) -> MultichannelSignal:
    """Normalize every channel to zero mean and unit sample standard deviation.

    A channel counts as constant when its standard deviation is below 1e-12
    times ``reference_scale`` (default: the channel's own peak magnitude). Pass
    the peak of the unfiltered input when z-scoring a filtered signal, since
    filtering a constant leaves rounding residue of arbitrary relative size.
    """
    x = sig.samples
    if x.shape[0] < 2:
        raise ZeroVarianceError("z-scoring needs at least two samples")
    mean = x.mean(axis=0)
    centered = x - mean
    std = centered.std(axis=0, ddof=1)
    scale = np.abs(x).max(axis=0) if reference_scale is None else reference_scale
    scale = np.maximum(scale, np.finfo(float).tiny)
    bad = std <= 1e-12 * scale
    if np.any(bad):
        raise ZeroVarianceError(
            f"channel(s) {np.flatnonzero(bad).tolist()} have zero variance")
    z = centered / std
    # second pass removes the residual rounding in mean and scale
    z = z - z.mean(axis=0)
    z = z / z.std(axis=0, ddof=1)
    return sig.with_samples(z)


def preprocess(sig: MultichannelSignal, band_hz: Sequence[float] = (1.0, 9.0),
               target_fs: float = 20.0, order: int = 4) -> MultichannelSignal:
    """Bandpass, resample to ``target_fs`` and z-score one trial.

    This is the chain applied identically to EEG and to speech envelopes.
    """
    filt = design_butterworth_bandpass(order, band_hz[0], band_hz[1], sig.fs)
    scale = np.abs(sig.samples).max(axis=0)
    y = filtfilt(filt, sig)
    up, down = rational_ratio(sig.fs, target_fs)
    y = resample_rational(y, up, down)
    return zscore_per_trial(y, reference_scale=scale)
