"""Sampled-signal container, windowed Fourier analysis and dB spectrograms.

Everything downstream (scene rendering, cross-correlation alignment, the
neural classifier) consumes the types defined here: ``Waveform`` for time
domain audio and ``Spectrogram`` for log-magnitude time-frequency matrices.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass, field

import numpy as np

MAGNITUDE_FLOOR = 1e-6          # keeps dB values finite on digital silence
DB_FLOOR = 20.0 * np.log10(MAGNITUDE_FLOOR)  # -120 dB
DEFAULT_SAMPLE_RATE = 16000


def _as_float_array(samples) -> np.ndarray:
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"samples must be 1-D, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class Waveform:
    """Mono sampled signal with amplitudes nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate_hz: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        object.__setattr__(self, "samples", _as_float_array(self.samples))
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite (no NaN/Inf)")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


def next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


@dataclass(frozen=True)
class StftConfig:
    """Analysis framing: 32 or 64 ms Hann frames at fixed 50% overlap."""

    frame_len_ms: int = 32

    def __post_init__(self):
        if self.frame_len_ms not in (32, 64):
            raise ValueError("frame_len_ms must be 32 or 64")

    def frame_samples(self, sample_rate_hz: int) -> int:
        n = self.frame_len_ms * sample_rate_hz / 1000.0
        if abs(n - round(n)) > 1e-9:
            raise ValueError(
                f"frame of {self.frame_len_ms} ms is not an integer number of "
                f"samples at {sample_rate_hz} Hz"
            )
        return int(round(n))

    def hop_samples(self, sample_rate_hz: int) -> int:
        return self.frame_samples(sample_rate_hz) // 2

    def fft_size(self, sample_rate_hz: int) -> int:
        return next_pow2(self.frame_samples(sample_rate_hz))


@dataclass
class ComplexFrames:
    """STFT output: one row of complex spectrum per frame, plus framing info."""

    values: np.ndarray          # (n_frames, fft_size) complex128
    hop_samples: int
    frame_samples: int
    sample_rate_hz: int
    start_sample: int = 0

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def fft_size(self) -> int:
        return self.values.shape[1]


@dataclass
class Spectrogram:
    """Log-magnitude spectrogram in dB, frames x bins, floored at -120 dB."""

    values: np.ndarray          # (n_frames, fft_size // 2 + 1) float64
    hop_samples: int
    frame_samples: int
    sample_rate_hz: int
    start_sample: int = 0

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]

    def frame_to_sample(self, frame: int) -> int:
        """Absolute sample index of the first sample covered by ``frame``."""
        return self.start_sample + frame * self.hop_samples


def hann_window(n: int) -> np.ndarray:
    """Periodic Hann window; sums to a constant under 50% overlap-add."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def fft(x, size: int) -> np.ndarray:
    """Forward DFT of ``x`` zero-padded/truncated to a power-of-two ``size``."""
    if size <= 0 or (size & (size - 1)) != 0:
        raise ValueError(f"fft size must be a power of two, got {size}")
    x = np.asarray(x)
    if x.shape[-1] > size:
        raise ValueError(f"input length {x.shape[-1]} exceeds fft size {size}")
    return np.fft.fft(x, n=size, axis=-1)


def stft(w: Waveform, cfg: StftConfig, start_sample: int = 0) -> ComplexFrames:
    """Hann-windowed STFT with 50% overlap.

    Frame ``t`` covers samples ``[t*hop, t*hop + frame_samples)``; a trailing
    partial frame is discarded so the frame count is deterministic.
    """
    frame = cfg.frame_samples(w.sample_rate_hz)
    hop = cfg.hop_samples(w.sample_rate_hz)
    n_fft = cfg.fft_size(w.sample_rate_hz)
    if len(w) < frame:
        raise ValueError(
            f"input too short: {len(w)} samples < one frame ({frame})"
        )
    n_frames = (len(w) - frame) // hop + 1
    window = hann_window(frame)
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * window[None, :]
    values = fft(frames, n_fft)
    return ComplexFrames(
        values=values,
        hop_samples=hop,
        frame_samples=frame,
        sample_rate_hz=w.sample_rate_hz,
        start_sample=start_sample,
    )


def magnitude_db(x) -> np.ndarray:
    """20*log10(|x|) with the magnitude floored at 1e-6 (-120 dB)."""
    mag = np.maximum(np.abs(np.asarray(x)), MAGNITUDE_FLOOR)
    return 20.0 * np.log10(mag)


def log_magnitude(frames: ComplexFrames) -> Spectrogram:
    """dB spectrogram of the non-redundant bins (fft_size/2 + 1)."""
    n_bins = frames.fft_size // 2 + 1
    return Spectrogram(
        values=magnitude_db(frames.values[:, :n_bins]),
        hop_samples=frames.hop_samples,
        frame_samples=frames.frame_samples,
        sample_rate_hz=frames.sample_rate_hz,
        start_sample=frames.start_sample,
    )


def spectrogram(w: Waveform, cfg: StftConfig, start_sample: int = 0) -> Spectrogram:
    return log_magnitude(stft(w, cfg, start_sample=start_sample))


# ----------------------------------------------------------------------
# WAV I/O: PCM 16-bit signed little-endian, canonical RIFF header.
# ----------------------------------------------------------------------

PCM_SCALE = 32768.0


def write_wav(path, samples: np.ndarray, sample_rate_hz: int) -> None:
    """Write float samples in [-1, 1) as 16-bit PCM.

    ``samples`` is (n,) for mono or (n, channels) for multi-channel.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"samples must be 1-D or 2-D, got shape {arr.shape}")
    pcm = np.clip(np.round(arr * PCM_SCALE), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(arr.shape[1])
        f.setsampwidth(2)
        f.setframerate(sample_rate_hz)
        f.writeframes(pcm.tobytes())


def read_wav(path):
    """Read a 16-bit PCM WAV; returns ((n, channels) float64 in [-1, 1), rate)."""
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError(f"only 16-bit PCM supported, got {8 * f.getsampwidth()}-bit")
        n_channels = f.getnchannels()
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / PCM_SCALE
    return data.reshape(-1, n_channels), rate
