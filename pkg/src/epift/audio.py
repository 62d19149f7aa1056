"""Waveform ingestion, log-mel features, and the synthetic harmonic-tone task."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.signal import resample_poly

from .episodes import Sample


class ParseError(ValueError):
    """Malformed or unsupported WAV data; message carries the byte offset."""


class AudioDataError(ValueError):
    """Audio content violates an op's precondition (e.g. clip too short)."""


@dataclass
class Waveform:
    samples: np.ndarray       # float32 in [-1, 1]
    rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.size == 0:
            raise AudioDataError("empty waveform")
        if not np.all(np.isfinite(self.samples)):
            raise AudioDataError("non-finite waveform samples")

    @property
    def duration(self):
        return len(self.samples) / self.rate

    def rms(self):
        return float(np.sqrt(np.mean(self.samples.astype(np.float64) ** 2)))


# -- WAV IO ---------------------------------------------------------------


def load_wav(path):
    """Read a RIFF/WAVE file (PCM 16-bit or IEEE float 32-bit, mono/stereo)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12 or raw[0:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise ParseError(f"{path}: missing RIFF/WAVE header at byte 0")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if size < 16:
                raise ParseError(f"{path}: fmt chunk too short at byte {pos}")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif cid == b"data":
            data = (pos + 8, body)
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise ParseError(f"{path}: missing fmt or data chunk (scanned to byte {pos})")
    tag, channels, rate, _, _, bits = fmt
    off, body = data
    if tag == 1 and bits == 16:
        x = np.frombuffer(body, dtype="<i2").astype(np.float32) / 32768.0
    elif tag == 3 and bits == 32:
        x = np.frombuffer(body, dtype="<f4").astype(np.float32)
    else:
        raise ParseError(
            f"{path}: unsupported codec (format {tag}, {bits}-bit) at byte {off}")
    if channels > 1:
        x = x[: (len(x) // channels) * channels].reshape(-1, channels).mean(axis=1)
    return Waveform(x, rate)


def write_wav(path, w: Waveform):
    """Write 16-bit PCM mono."""
    x = np.clip(w.samples, -1.0, 1.0)
    pcm = (x * 32767.0).astype("<i2").tobytes()
    hdr = struct.pack("<4sI4s4sIHHIIHH4sI", b"RIFF", 36 + len(pcm), b"WAVE",
                      b"fmt ", 16, 1, 1, w.rate, w.rate * 2, 2, 16,
                      b"data", len(pcm))
    with open(path, "wb") as f:
        f.write(hdr + pcm)


# -- resampling / duration ------------------------------------------------


def resample(w: Waveform, target_rate):
    """Band-limited polyphase resampling; identity when rates match."""
    if target_rate <= 0:
        raise AudioDataError(f"target rate must be positive, got {target_rate}")
    if target_rate == w.rate:
        return w
    frac = Fraction(int(target_rate), int(w.rate))
    y = resample_poly(w.samples.astype(np.float64), frac.numerator, frac.denominator)
    return Waveform(y.astype(np.float32), int(target_rate))


def fix_duration(w: Waveform, seconds):
    """Zero-pad or truncate on the right to exactly round(seconds * rate) samples."""
    if seconds <= 0:
        raise AudioDataError(f"duration must be positive, got {seconds}")
    n = int(round(seconds * w.rate))
    x = w.samples
    if len(x) > n:
        x = x[:n]
    elif len(x) < n:
        x = np.pad(x, (0, n - len(x)))
    return Waveform(x, w.rate)


# -- log-mel features -----------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_bins, n_fft, rate):
    """HTK-mel triangular filters spanning 0..rate/2, shape (n_bins, n_fft//2+1)."""
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(rate / 2.0), n_bins + 2))
    freqs = np.linspace(0.0, rate / 2.0, n_fft // 2 + 1)
    fb = np.zeros((n_bins, len(freqs)))
    for b in range(n_bins):
        lo, ctr, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / max(ctr - lo, 1e-9)
        down = (hi - freqs) / max(hi - ctr, 1e-9)
        fb[b] = np.maximum(0.0, np.minimum(up, down))
    return fb


def mel_bin_centers(n_bins, rate):
    edges = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(rate / 2.0), n_bins + 2))
    return edges[1:-1]


def stft_magnitude(x, window, hop, n_fft):
    """Hann-windowed magnitude STFT, frames = floor((len - window)/hop) + 1."""
    if len(x) < window:
        raise AudioDataError(
            f"clip of {len(x)} samples shorter than one {window}-sample window")
    n_frames = (len(x) - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = np.asarray(x, dtype=np.float64)[idx]
    win = np.hanning(window)
    return np.abs(np.fft.rfft(frames * win, n=n_fft, axis=1)).T   # (n_fft//2+1, frames)


def log_mel(w: Waveform, bins=128, window=1024, hop=512, n_fft=None, eps=1e-10):
    """128-bin (by default) log-scale mel-spectrogram, (bins, frames)."""
    n_fft = n_fft or window
    if not (n_fft >= window >= hop):
        raise AudioDataError(
            f"need fft size >= window >= hop, got {n_fft}/{window}/{hop}")
    mag = stft_magnitude(w.samples, window, hop, n_fft)
    fb = mel_filterbank(bins, n_fft, w.rate)
    return np.log(fb @ mag + eps).astype(np.float32)


# -- synthetic harmonic-tone task ----------------------------------------


@dataclass
class SynthTaskSpec:
    """Desk-scale stand-in dataset: jittered harmonic tones per class."""

    n_classes: int = 28
    base_fundamental: float = 110.0
    semitone_step: float = 1.0         # class spacing; must stay >= 1 semitone
    n_harmonics: int = 5
    jitter_cents: float = 45.0
    amp_jitter_db: float = 6.0
    noise_floor_db: float = -18.0
    clip_seconds: float = 0.5
    rate: int = 8000
    mel_bins: int = 32
    window: int = 256
    hop: int = 128

    def __post_init__(self):
        if self.semitone_step < 1.0:
            raise AudioDataError("class fundamentals must differ by >= 1 semitone")

    def fundamental(self, class_id):
        return self.base_fundamental * 2.0 ** (class_id * self.semitone_step / 12.0)

    def harmonic_amps(self, class_id):
        # class-dependent spectral envelope so timbre also separates classes
        k = np.arange(1, self.n_harmonics + 1, dtype=np.float64)
        tilt = 0.5 + 0.5 * ((class_id * 2654435761) % 97) / 97.0
        return 1.0 / k ** tilt


def synth_waveform(spec: SynthTaskSpec, class_id, rng):
    """Render one jittered harmonic tone plus a noise floor."""
    n = int(round(spec.clip_seconds * spec.rate))
    t = np.arange(n) / spec.rate
    cents = rng.uniform(-spec.jitter_cents, spec.jitter_cents)
    f0 = spec.fundamental(class_id) * 2.0 ** (cents / 1200.0)
    amps = spec.harmonic_amps(class_id)
    x = np.zeros(n)
    for k, a in enumerate(amps, start=1):
        gain_db = rng.uniform(-spec.amp_jitter_db, spec.amp_jitter_db)
        if k * f0 < spec.rate / 2:
            x += a * 10.0 ** (gain_db / 20.0) * np.sin(
                2 * np.pi * k * f0 * t + rng.uniform(0, 2 * np.pi))
    x /= max(np.max(np.abs(x)), 1e-9) * 2.0
    noise_rms = 10.0 ** (spec.noise_floor_db / 20.0)
    x += rng.normal(0.0, noise_rms, size=n)
    return Waveform(np.clip(x, -1.0, 1.0).astype(np.float32), spec.rate)


def synth_sample(spec: SynthTaskSpec, class_id, seed, keep_waveform=True):
    rng = np.random.default_rng(seed)
    w = synth_waveform(spec, class_id, rng)
    feats = log_mel(w, bins=spec.mel_bins, window=spec.window, hop=spec.hop)
    return Sample(features=feats, class_id=class_id,
                  source_id=f"synth:{class_id}:{seed}",
                  waveform=w if keep_waveform else None)


def synth_dataset(spec: SynthTaskSpec, per_class, seed, classes=None, keep_waveform=True):
    """Labeled pool {class_id: [Sample, ...]}; fully determined by seed."""
    pool = {}
    classes = range(spec.n_classes) if classes is None else classes
    for cid in classes:
        pool[cid] = [
            synth_sample(spec, cid, seed * 1_000_003 + cid * 1_009 + i,
                         keep_waveform=keep_waveform)
            for i in range(per_class)
        ]
    return pool


def split_classes(class_names, counts, seed=0):
    """Class-disjoint train/val/test split by sorted name under a fixed seed."""
    names = sorted(class_names)
    if sum(counts) > len(names):
        raise AudioDataError(
            f"split {counts} needs {sum(counts)} classes, have {len(names)}")
    order = np.random.default_rng(seed).permutation(len(names))
    picked = [names[i] for i in order]
    n_tr, n_va, n_te = counts
    return (sorted(picked[:n_tr]),
            sorted(picked[n_tr:n_tr + n_va]),
            sorted(picked[n_tr + n_va:n_tr + n_va + n_te]))
