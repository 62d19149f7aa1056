"""Waveform-level augmentations for the replicated shot inside ADFT."""

from __future__ import annotations

from dataclasses import replace
from fractions import Fraction

import numpy as np
from scipy.signal import lfilter, resample_poly

from .audio import Waveform, log_mel
from .episodes import Sample
from .nn import ConfigError

SNR_RANGE_DB = (12.0, 100.0)
GAMMA_RANGE = (-2.0, 2.0)
EQ_FREQ_RANGE_HZ = (30.0, 3000.0)
EQ_GAIN_RANGE_DB = (-8.0, 8.0)
EQ_Q = 0.707
PITCH_SEMITONES = (-2, -1, 1, 2)

# nonsilent-precondition fallbacks, reset manually in tests
WARNING_COUNTERS = {"silent_input": 0}


def colored_noise(n, gamma, rng):
    """Unit-RMS Gaussian noise with power spectral density ~ |f|^(-gamma)."""
    x = rng.standard_normal(n)
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(n)
    shape = np.ones_like(f)
    shape[1:] = f[1:] ** (-gamma / 2.0)
    shape[0] = shape[1]                       # keep DC finite for gamma > 0
    y = np.fft.irfft(spec * shape, n=n)
    y -= y.mean()
    return y / max(np.sqrt(np.mean(y ** 2)), 1e-12)


def add_colored_noise(w: Waveform, rng, snr_db=None, gamma=None):
    """Mix in random-colored noise at a uniformly drawn target SNR (dB)."""
    sig = w.samples.astype(np.float64)
    sig_rms = np.sqrt(np.mean(sig ** 2))
    if sig_rms <= 0:
        WARNING_COUNTERS["silent_input"] += 1
        return w
    if snr_db is None:
        snr_db = rng.uniform(*SNR_RANGE_DB)
    if gamma is None:
        gamma = rng.uniform(*GAMMA_RANGE)
    noise = colored_noise(len(sig), gamma, rng)
    noise *= sig_rms / (10.0 ** (snr_db / 20.0))
    return Waveform(np.clip(sig + noise, -1.0, 1.0).astype(np.float32), w.rate)


def peaking_biquad(center_hz, gain_db, q, rate):
    """RBJ cookbook peaking-EQ coefficients (b, a), a0-normalized."""
    A = 10.0 ** (gain_db / 40.0)
    w0 = 2.0 * np.pi * center_hz / rate
    alpha = np.sin(w0) / (2.0 * q)
    cw = np.cos(w0)
    b = np.array([1 + alpha * A, -2 * cw, 1 - alpha * A])
    a = np.array([1 + alpha / A, -2 * cw, 1 - alpha / A])
    return b / a[0], a / a[0]


def equalizer_chain(w: Waveform, rng, stages=4, q=EQ_Q, gains_db=None, centers_hz=None):
    """Apply `stages` random peaking biquads in series."""
    if w.rate <= 2 * EQ_FREQ_RANGE_HZ[1]:
        raise ConfigError(
            f"equalizer needs rate > {2 * EQ_FREQ_RANGE_HZ[1]:.0f} Hz, got {w.rate}")
    x = w.samples.astype(np.float64)
    lo, hi = np.log(EQ_FREQ_RANGE_HZ[0]), np.log(EQ_FREQ_RANGE_HZ[1])
    for s in range(stages):
        fc = centers_hz[s] if centers_hz is not None else float(np.exp(rng.uniform(lo, hi)))
        g = gains_db[s] if gains_db is not None else float(rng.uniform(*EQ_GAIN_RANGE_DB))
        b, a = peaking_biquad(fc, g, q, w.rate)
        x = lfilter(b, a, x)
    return Waveform(np.clip(x, -1.0, 1.0).astype(np.float32), w.rate)


def pitch_shift(w: Waveform, semitones=None, rng=None, allow_any=False):
    """Shift pitch by resampling, then restore the original length.

    The resampling route slightly alters tempo; clips here are short enough
    for that to be acceptable. `allow_any` unlocks semitone values outside the
    standard set for test scenarios (e.g. a full octave).
    """
    if semitones is None:
        if rng is None:
            raise ConfigError("pitch_shift needs either semitones or rng")
        semitones = int(PITCH_SEMITONES[rng.integers(len(PITCH_SEMITONES))])
    if not allow_any and semitones not in PITCH_SEMITONES:
        raise ConfigError(
            f"semitone shift {semitones} outside allowed set {PITCH_SEMITONES}")
    ratio = Fraction(2.0 ** (-semitones / 12.0)).limit_denominator(1000)
    y = resample_poly(w.samples.astype(np.float64), ratio.numerator, ratio.denominator)
    n = len(w.samples)
    if len(y) > n:
        y = y[:n]
    else:
        y = np.pad(y, (0, n - len(y)))
    return Waveform(np.clip(y, -1.0, 1.0).astype(np.float32), w.rate)


AUGMENT_KINDS = ("noise", "equalizer", "pitch")


def random_augment(w: Waveform, rng):
    """Uniformly pick one of the three augmentations and apply it."""
    kind = AUGMENT_KINDS[rng.integers(len(AUGMENT_KINDS))]
    return apply_augment(w, kind, rng)


def apply_augment(w: Waveform, kind, rng):
    if kind == "noise":
        return add_colored_noise(w, rng)
    if kind == "equalizer":
        return equalizer_chain(w, rng)
    if kind == "pitch":
        return pitch_shift(w, rng=rng)
    if kind == "random":
        return random_augment(w, rng)
    raise ConfigError(f"unknown augmentation: {kind}")


# dataset presets: best-performing effect per audio domain
PRESET_AUGMENT = {"environmental": "pitch", "speech": "equalizer", "music": "equalizer"}


def make_sample_augmenter(kind, mel_bins, window, hop):
    """Sample -> Sample augmenter for adft_split; needs waveforms on samples."""

    def augmenter(sample: Sample, rng):
        if sample.waveform is None:
            raise ValueError(f"sample {sample.source_id} carries no waveform")
        w2 = apply_augment(sample.waveform, kind, rng)
        feats = log_mel(w2, bins=mel_bins, window=window, hop=hop)
        return replace(sample, features=feats, waveform=w2,
                       source_id=sample.source_id + f"+{kind}")

    return augmenter
