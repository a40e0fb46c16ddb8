"""Speech envelope extraction: gammatone filterbank, powerlaw compression, summation."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import signal as sps

from .errors import ConfigError, InvalidBandError, InvalidExponentError, ShapeError
from .signal import (
    MultichannelSignal,
    design_butterworth_bandpass,
    filtfilt,
    preprocess,
    rational_ratio,
    resample_rational,
)

__all__ = [
    "GammatoneBankSpec",
    "Envelope",
    "erb_bandwidth",
    "erb_space",
    "gammatone_filterbank",
    "powerlaw_envelope",
    "preprocess_envelope",
    "audio_to_envelope",
]


def erb_bandwidth(f):
    """Equivalent rectangular bandwidth (Glasberg & Moore) in Hz."""
    return 24.7 * (4.37e-3 * np.asarray(f, dtype=float) + 1.0)


def _hz_to_erb_number(f):
    return 21.4 * np.log10(1.0 + 4.37e-3 * np.asarray(f, dtype=float))


def _erb_number_to_hz(e):
    return (10.0 ** (np.asarray(e, dtype=float) / 21.4) - 1.0) / 4.37e-3


def erb_space(f_low: float, f_high: float, n: int) -> np.ndarray:
    """``n`` center frequencies equally spaced on the ERB-number scale."""
    if n == 1:
        e = np.array([0.5 * (_hz_to_erb_number(f_low) + _hz_to_erb_number(f_high))])
    else:
        e = np.linspace(_hz_to_erb_number(f_low), _hz_to_erb_number(f_high), n)
    return _erb_number_to_hz(e)


@dataclass(frozen=True)
class GammatoneBankSpec:
    n_bands: int = 28
    f_low: float = 50.0
    f_high: float = 5000.0
    filter_order: int = 4
    fs: Optional[float] = None

    def validate(self, fs: float):
        if self.n_bands < 1:
            raise ConfigError(f"n_bands must be >= 1, got {self.n_bands}")
        if self.fs is not None and not np.isclose(self.fs, fs):
            raise ConfigError(f"bank designed for {self.fs} Hz applied at {fs} Hz")
        if not (0 < self.f_low < self.f_high < fs / 2):
            raise InvalidBandError(
                f"center range [{self.f_low}, {self.f_high}] Hz must lie in (0, {fs / 2})")

    def center_frequencies(self) -> np.ndarray:
        return erb_space(self.f_low, self.f_high, self.n_bands)

    def filters(self, fs: float):
        """(b, a) pairs, one per band, ordered by center frequency."""
        self.validate(fs)
        out = []
        for fc in self.center_frequencies():
            if self.filter_order == 4:
                b, a = sps.gammatone(fc, "iir", fs=fs)
            else:
                b = sps.gammatone(fc, "fir", order=self.filter_order, fs=fs)[0]
                a = np.array([1.0])
            out.append((b, a))
        return out


@dataclass(frozen=True)
class Envelope(MultichannelSignal):
    """Single-channel envelope signal with the parameters that produced it."""

    exponent: Optional[float] = None
    bank: Optional[GammatoneBankSpec] = None

    def __post_init__(self):
        super().__post_init__()
        if self.n_channels != 1:
            raise ShapeError(f"an envelope has one channel, got {self.n_channels}")

    @property
    def values(self) -> np.ndarray:
        return self.samples[:, 0]

    def with_samples(self, samples, fs=None) -> "Envelope":
        return Envelope(samples, self.fs if fs is None else fs, self.channel_labels,
                        exponent=self.exponent, bank=self.bank)


def gammatone_filterbank(audio: MultichannelSignal, spec: GammatoneBankSpec) -> MultichannelSignal:
    """Split single-channel audio into ERB-spaced gammatone subbands (one per column)."""
    if audio.n_channels != 1:
        raise ShapeError(f"audio must be single-channel, got {audio.n_channels} channels")
    x = audio.samples[:, 0]
    bands = [sps.lfilter(b, a, x) for b, a in spec.filters(audio.fs)]
    labels = [f"{fc:.1f}Hz" for fc in spec.center_frequencies()]
    return MultichannelSignal(np.stack(bands, axis=1), audio.fs, labels)


def powerlaw_envelope(subbands: MultichannelSignal, exponent: float = 0.6,
                      bank: Optional[GammatoneBankSpec] = None) -> Envelope:
    """Sum of ``|subband| ** exponent`` over all subbands."""
    if not exponent > 0:
        raise InvalidExponentError(f"exponent must be positive, got {exponent}")
    env = (np.abs(subbands.samples) ** exponent).sum(axis=1)
    return Envelope(env, subbands.fs, exponent=float(exponent), bank=bank)


def preprocess_envelope(env: MultichannelSignal, target_fs: float = 20.0,
                        band_hz=(1.0, 9.0)) -> Envelope:
    """Same 1-9 Hz zero-phase bandpass, resampling and z-scoring as the EEG."""
    y = preprocess(env, band_hz=band_hz, target_fs=target_fs)
    if isinstance(env, Envelope):
        return Envelope(y.samples, y.fs, exponent=env.exponent, bank=env.bank)
    return Envelope(y.samples, y.fs)


def audio_to_envelope(audio: MultichannelSignal, spec: Optional[GammatoneBankSpec] = None,
                      exponent: float = 0.6, dataset_compatible: bool = True,
                      intermediate_fs: float = 128.0) -> Envelope:
    """Raw audio to a broadband envelope.

    With ``dataset_compatible`` the summed envelope is additionally bandpassed
    to 1-40 Hz and brought to ``intermediate_fs``, mirroring how the published
    envelopes were produced. Apply :func:`preprocess_envelope` afterwards.
    """
    spec = spec or GammatoneBankSpec()
    env = powerlaw_envelope(gammatone_filterbank(audio, spec), exponent, bank=spec)
    if not dataset_compatible:
        return env
    filt = design_butterworth_bandpass(4, 1.0, 40.0, env.fs)
    env = filtfilt(filt, env)
    up, down = rational_ratio(env.fs, intermediate_fs)
    return resample_rational(env, up, down)
