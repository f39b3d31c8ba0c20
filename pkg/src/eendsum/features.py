"""Log-Mel filterbank feature extraction and framing utilities."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

# Floor added to filterbank energies before the log; keeps silence finite.
ENERGY_FLOOR = 1e-10


@dataclass
class FeatureSequence:
    """Acoustic features as an (n_mels, n_frames) matrix with frame timing."""

    values: np.ndarray
    frame_length: float
    frame_shift: float
    sample_rate: int

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2 or self.values.shape[1] < 1:
            raise ValueError("feature matrix must be 2-D with at least one frame")
        if not np.isfinite(self.values).all():
            raise ValueError("feature matrix contains non-finite values")
        if self.frame_shift > self.frame_length:
            raise ValueError("frame_shift must not exceed frame_length")

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def read_wav(path: str | os.PathLike) -> tuple[np.ndarray, int]:
    """Read a mono 16-bit PCM WAV file as float64 in [-1, 1)."""
    sr, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0, sr
    if np.issubdtype(data.dtype, np.floating):
        return data.astype(np.float64), sr
    raise ValueError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path: str | os.PathLike, audio: np.ndarray, sample_rate: int) -> None:
    """Write a float waveform as mono 16-bit PCM, clipping to [-1, 1)."""
    clipped = np.clip(np.asarray(audio, dtype=np.float64), -1.0, 32767.0 / 32768.0)
    wavfile.write(path, sample_rate, (clipped * 32768.0).astype(np.int16))


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular Mel filters spanning 0 Hz to Nyquist.

    Returns an (n_mels, n_fft // 2 + 1) matrix applied to power spectra.
    """

    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    n_bins = n_fft // 2 + 1
    fft_freqs = np.linspace(0.0, sample_rate / 2.0, n_bins)
    mel_points = np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2)
    hz_points = mel_to_hz(mel_points)

    filters = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (fft_freqs - left) / (center - left)
        falling = (right - fft_freqs) / (right - center)
        filters[m] = np.maximum(0.0, np.minimum(rising, falling))
    return filters


def num_frames(n_samples: int, sample_rate: int, frame_length: float, frame_shift: float) -> int:
    """Frame count: 1 + floor((len - frame_length*sr) / (frame_shift*sr))."""
    win = int(round(frame_length * sample_rate))
    hop = int(round(frame_shift * sample_rate))
    if n_samples < win:
        raise ValueError(f"audio of {n_samples} samples is shorter than one frame ({win})")
    return 1 + (n_samples - win) // hop


def log_mel(
    audio: np.ndarray,
    sample_rate: int,
    n_mels: int = 23,
    frame_length: float = 0.025,
    frame_shift: float = 0.010,
) -> FeatureSequence:
    """Extract log-scaled Mel filterbank features.

    Frames are Hann-windowed, power spectra pass through triangular Mel
    filters, and values are ``ln(energy + ENERGY_FLOOR)``.
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise ValueError("expected a 1-D mono waveform")
    win = int(round(frame_length * sample_rate))
    hop = int(round(frame_shift * sample_rate))
    t = num_frames(len(audio), sample_rate, frame_length, frame_shift)

    n_fft = 1
    while n_fft < win:
        n_fft *= 2
    window = np.hanning(win)
    idx = np.arange(win)[None, :] + hop * np.arange(t)[:, None]
    frames = audio[idx] * window
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2  # (T, n_fft//2+1)
    energies = power @ mel_filterbank(n_mels, n_fft, sample_rate).T  # (T, n_mels)
    values = np.log(energies + ENERGY_FLOOR).T.astype(np.float32)
    return FeatureSequence(values, frame_length, frame_shift, sample_rate)


def pad_or_crop(
    feat: FeatureSequence, target_t: int, seed: int = 0
) -> FeatureSequence:
    """Fix the frame count: random-offset crop when too long, right-pad
    with silence frames (``ln(ENERGY_FLOOR)``) when too short."""
    if target_t < 1:
        raise ValueError("target_t must be >= 1")
    values, _ = _pad_or_crop_values(feat.values, target_t, seed)
    return FeatureSequence(values, feat.frame_length, feat.frame_shift, feat.sample_rate)


def _pad_or_crop_values(
    values: np.ndarray, target_t: int, seed: int
) -> tuple[np.ndarray, int]:
    """Shared crop/pad core; returns the chosen crop offset (0 when padding)
    so callers can apply the identical window to aligned label matrices."""
    t = values.shape[1]
    if t == target_t:
        return values, 0
    if t > target_t:
        offset = int(np.random.default_rng(seed).integers(0, t - target_t + 1))
        return values[:, offset : offset + target_t], offset
    pad = np.full((values.shape[0], target_t - t), np.log(ENERGY_FLOOR), dtype=values.dtype)
    return np.concatenate([values, pad], axis=1), 0


def standardize(feat: FeatureSequence) -> FeatureSequence:
    """Per-recording zero-mean unit-variance normalization of each bin."""
    mean = feat.values.mean(axis=1, keepdims=True)
    std = feat.values.std(axis=1, keepdims=True)
    values = (feat.values - mean) / np.maximum(std, 1e-8)
    return FeatureSequence(values, feat.frame_length, feat.frame_shift, feat.sample_rate)
