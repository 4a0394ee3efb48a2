"""Log-mel band energy (LMBE) feature extraction for node signals.

Pipeline: Hann-windowed short-time power spectra, triangular mel
filterbank, log compression with an energy floor. All functions are pure
and deterministic, so they can run in parallel workers without locking.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

DEFAULT_SAMPLE_RATE = 16000
DEFAULT_FRAME_LEN_S = 0.064
DEFAULT_HOP_S = 0.032
DEFAULT_BAND_COUNT = 128
ENERGY_FLOOR = 1e-10


class SignalTooShortError(ValueError):
    """Raised when a signal does not fill a single analysis frame."""


@dataclass
class AudioSignal:
    """Mono time-domain signal with finite float64 samples."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("signal contains non-finite samples")

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class LmbeMatrix:
    """Frames-by-bands matrix of log-mel band energies."""

    values: np.ndarray
    band_count: int
    frame_len_s: float
    hop_s: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != self.band_count:
            raise ValueError(
                f"expected (frames, {self.band_count}) values, got {self.values.shape}"
            )

    @property
    def frame_count(self) -> int:
        return self.values.shape[0]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def frame_counts(n_samples: int, frame: int, hop: int) -> int:
    return (n_samples - frame) // hop + 1


def stft_power(
    signal: AudioSignal,
    frame_len_s: float = DEFAULT_FRAME_LEN_S,
    hop_s: float = DEFAULT_HOP_S,
) -> np.ndarray:
    """One-sided power spectrogram of Hann-windowed frames.

    Returns an array of shape (frames, frame_samples // 2 + 1) where each
    row holds |DFT|^2 of one windowed frame. Frames are taken without
    padding, so the frame count is floor((N - L) / R) + 1.
    """
    sr = signal.sample_rate
    frame = int(round(frame_len_s * sr))
    hop = int(round(hop_s * sr))
    if frame < 2:
        raise ValueError(f"frame of {frame} samples is too small for a DFT")
    if hop < 1 or hop > frame:
        raise ValueError(f"hop of {hop} samples must lie in [1, {frame}]")
    x = signal.samples
    if x.size < frame:
        raise SignalTooShortError(
            f"signal too short: {x.size} samples < one {frame}-sample frame"
        )
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    window = np.hanning(frame)
    spectrum = np.fft.rfft(frames * window, axis=1)
    return np.abs(spectrum) ** 2


def mel_filterbank(bins: int, band_count: int, sample_rate: int) -> np.ndarray:
    """Triangular mel filterbank weights of shape (band_count, bins).

    Band edges are spaced uniformly on the mel scale over 0..sample_rate/2
    and snapped to distinct FFT bins, so every filter peaks at exactly 1 on
    its own center bin and keeps nonzero support. Snapping needs
    bins >= band_count + 2. Per-bin weights over all bands never sum above 1.
    """
    if band_count < 1:
        raise ValueError("band_count must be >= 1")
    if bins < band_count + 2:
        raise ValueError(
            f"{band_count} mel bands need at least {band_count + 2} spectrum bins, got {bins}"
        )
    n_fft = 2 * (bins - 1)
    mel_points = np.linspace(0.0, hz_to_mel(sample_rate / 2.0), band_count + 2)
    hz_points = mel_to_hz(mel_points)
    edges = np.floor(hz_points * n_fft / sample_rate).astype(int)
    for i in range(1, edges.size):  # keep edges strictly increasing
        edges[i] = max(edges[i], edges[i - 1] + 1)
    if edges[-1] > bins - 1:
        raise ValueError(f"cannot fit {band_count} distinct mel bands into {bins} bins")

    weights = np.zeros((band_count, bins))
    for m in range(band_count):
        lo, center, hi = edges[m], edges[m + 1], edges[m + 2]
        rising = np.arange(lo, center)
        weights[m, rising] = (rising - lo) / (center - lo)
        falling = np.arange(center, hi)
        weights[m, falling] = (hi - falling) / (hi - center)
    return weights


def lmbe(
    signal: AudioSignal,
    frame_len_s: float = DEFAULT_FRAME_LEN_S,
    hop_s: float = DEFAULT_HOP_S,
    band_count: int = DEFAULT_BAND_COUNT,
    energy_floor: float = ENERGY_FLOOR,
) -> LmbeMatrix:
    """Log-mel band energies: log(max(filterbank @ power, energy_floor))."""
    power = stft_power(signal, frame_len_s, hop_s)
    bank = mel_filterbank(power.shape[1], band_count, signal.sample_rate)
    band_energy = power @ bank.T
    values = np.log(np.maximum(band_energy, energy_floor))
    return LmbeMatrix(values=values, band_count=band_count, frame_len_s=frame_len_s, hop_s=hop_s)


def read_wav(path) -> AudioSignal:
    """Read a mono 16-bit PCM RIFF file into [-1, 1) float samples."""
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise ValueError(f"expected mono WAV, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise ValueError("expected 16-bit PCM WAV")
        raw = fh.readframes(fh.getnframes())
        sr = fh.getframerate()
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(samples=samples, sample_rate=sr)


def write_wav(path, signal: AudioSignal) -> None:
    """Write a signal as mono 16-bit PCM, hard-clipping outside [-1, 1)."""
    clipped = np.clip(signal.samples, -1.0, 32767.0 / 32768.0)
    pcm = np.round(clipped * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(signal.sample_rate)
        fh.writeframes(pcm.tobytes())
