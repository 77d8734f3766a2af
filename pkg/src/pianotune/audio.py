"""Mono audio clips and 16-bit PCM WAV I/O."""

from __future__ import annotations

import io
import math
import wave
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
import numpy.typing as npt
from scipy.signal import resample_poly

from pianotune.errors import AudioFormatError

PCM_SCALE = 32767.0
SILENCE_RMS = 1e-4


@dataclass(frozen=True)
class AudioClip:
    """Mono float32 samples in [-1, 1]."""

    sample_rate: int
    samples: npt.NDArray[np.float32]

    def __post_init__(self) -> None:
        samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if samples.size and not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        if samples.size and float(np.max(np.abs(samples))) > 1.0:
            raise ValueError("AudioClip samples must lie in [-1, 1]")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return int(self.samples.size)

    @property
    def duration_seconds(self) -> float:
        return len(self) / self.sample_rate

    @classmethod
    def silence(cls, sample_rate: int, seconds: float) -> "AudioClip":
        return cls(sample_rate, np.zeros(int(math.floor(seconds * sample_rate)), dtype=np.float32))


def peak(clip: AudioClip) -> float:
    return float(np.max(np.abs(clip.samples))) if len(clip) else 0.0


def rms(clip: AudioClip) -> float:
    if not len(clip):
        return 0.0
    return float(np.sqrt(np.mean(np.square(clip.samples, dtype=np.float64))))


def is_silent(clip: AudioClip, threshold: float = SILENCE_RMS) -> bool:
    return rms(clip) < threshold


def crop_audio(clip: AudioClip, seconds: float) -> AudioClip:
    """Keep the first floor(seconds * sample_rate) samples; never pads."""
    if seconds <= 0:
        raise ValueError("seconds must be positive")
    n = int(math.floor(seconds * clip.sample_rate))
    if n >= len(clip):
        return clip
    return AudioClip(clip.sample_rate, clip.samples[:n])


def resample(clip: AudioClip, sample_rate: int) -> AudioClip:
    """Polyphase resampling to `sample_rate`, clipped back into [-1, 1]."""
    if not len(clip):
        return AudioClip(sample_rate, clip.samples)
    if clip.sample_rate == sample_rate:
        return clip
    ratio = Fraction(sample_rate, clip.sample_rate)
    out = resample_poly(clip.samples.astype(np.float64), ratio.numerator, ratio.denominator)
    return AudioClip(sample_rate, np.clip(out, -1.0, 1.0).astype(np.float32))


def write_wav(clip: AudioClip) -> bytes:
    """Canonical 44-byte-header RIFF WAV, 16-bit PCM mono."""
    pcm = np.clip(np.round(clip.samples.astype(np.float64) * PCM_SCALE), -PCM_SCALE, PCM_SCALE)
    buffer = io.BytesIO()
    with wave.open(buffer, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(pcm.astype("<i2").tobytes())
    return buffer.getvalue()


def read_wav(data: bytes) -> AudioClip:
    """Decode 16-bit PCM WAV; multi-channel input is averaged down to mono."""
    if data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError("Not a RIFF WAVE file")
    try:
        with wave.open(io.BytesIO(data), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            frames = w.readframes(w.getnframes())
    except (wave.Error, EOFError) as e:
        raise AudioFormatError(f"Malformed WAV data: {e}")
    if width != 2:
        raise AudioFormatError(f"Only 16-bit PCM is supported, got {8 * width}-bit")

    pcm = np.frombuffer(frames[: len(frames) - len(frames) % (2 * channels)], dtype="<i2")
    samples = pcm.reshape(-1, channels).astype(np.float64).mean(axis=1) / PCM_SCALE
    return AudioClip(rate, np.clip(samples, -1.0, 1.0).astype(np.float32))
