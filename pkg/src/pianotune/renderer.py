"""Score to audio: a builtin additive synth and an external soundfont hook."""

from __future__ import annotations

import logging
import math
import subprocess
import tempfile
import threading
from pathlib import Path

import numpy as np

from pianotune.audio import AudioClip, crop_audio, read_wav, resample
from pianotune.config import RendererChoice, RendererKind, settings
from pianotune.errors import AudioFormatError, RenderError
from pianotune.midi_core import TempoMap, write_smf
from pianotune.models import Note, Score

logger = logging.getLogger(__name__)

HARMONICS = (1.0, 0.5, 0.25, 0.125)
ATTACK_SECONDS = 0.005
DECAY_SECONDS = 0.5
RELEASE_SECONDS = 0.010
MIX_GAIN = 0.3

_external_slots = threading.BoundedSemaphore(settings.render_workers)


def score_duration_seconds(score: Score) -> float:
    return TempoMap(score).seconds(score.end_tick)


def release_samples(sample_rate: int) -> int:
    return max(1, int(round(RELEASE_SECONDS * sample_rate)))


def _note_tone(note: Note, gate_samples: int, sample_rate: int) -> np.ndarray:
    """Tone gated after `gate_samples`, followed by a linear release to silence."""
    release = release_samples(sample_rate)
    n_samples = gate_samples + release
    t = np.arange(n_samples, dtype=np.float64) / sample_rate
    frequency = 440.0 * 2.0 ** ((note.pitch - 69) / 12)
    tone = np.zeros(n_samples, dtype=np.float64)
    for k, amplitude in enumerate(HARMONICS, start=1):
        if k * frequency >= sample_rate / 2:
            break
        tone += amplitude * np.sin(2 * np.pi * k * frequency * t)

    envelope = np.minimum(t / ATTACK_SECONDS, 1.0) * np.exp(-t / DECAY_SECONDS)
    envelope[gate_samples:] *= np.arange(release, 0, -1, dtype=np.float64) / release
    return tone * envelope * (note.velocity / 127.0) ** 2


def render_builtin(score: Score, sample_rate: int, max_seconds: float | None = None) -> AudioClip:
    """Additive 4-harmonic synth with a tanh limiter; pure and bit-for-bit deterministic.

    The clip runs to the last note offset plus one release. With `max_seconds`,
    only the first floor(max_seconds * sample_rate) samples are produced; the
    result equals cropping the full render.
    """
    tempo_map = TempoMap(score)
    total = 0
    if score.notes:
        total = int(round(tempo_map.seconds(score.end_tick) * sample_rate)) + release_samples(sample_rate)
    if max_seconds is not None:
        total = min(total, int(math.floor(max_seconds * sample_rate)))

    mix = np.zeros(total, dtype=np.float64)
    for note in score.notes:
        start = int(round(tempo_map.seconds(note.onset) * sample_rate))
        end = int(round(tempo_map.seconds(note.offset) * sample_rate))
        if start >= total:
            continue
        tone = _note_tone(note, max(1, end - start), sample_rate)
        stop = min(total, start + len(tone))
        mix[start:stop] += tone[: stop - start]

    return AudioClip(sample_rate, np.tanh(MIX_GAIN * mix).astype(np.float32))


def render_external(score: Score, choice: RendererChoice, sample_rate: int) -> AudioClip:
    """Run `<executable> <midi> <soundfont> <out.wav>` and read the result back."""
    with _external_slots, tempfile.TemporaryDirectory(prefix="pianotune-render-") as tmp:
        midi_path = Path(tmp) / "score.mid"
        wav_path = Path(tmp) / "out.wav"
        midi_path.write_bytes(write_smf(score))
        command = [str(choice.executable), str(midi_path), str(choice.soundfont), str(wav_path)]
        logger.debug("Running external renderer %s: %s", choice.name, command)
        try:
            result = subprocess.run(command, capture_output=True, text=True, timeout=choice.timeout_s)
        except subprocess.TimeoutExpired as e:
            raise RenderError(f"Renderer {choice.name} timed out after {choice.timeout_s}s", str(e.stderr or ""))
        except OSError as e:
            raise RenderError(f"Renderer {choice.name} could not be started: {e}")
        if result.returncode != 0:
            raise RenderError(
                f"Renderer {choice.name} exited with status {result.returncode}",
                (result.stderr or result.stdout or "").strip(),
            )
        try:
            clip = read_wav(wav_path.read_bytes())
        except (OSError, AudioFormatError) as e:
            raise RenderError(f"Renderer {choice.name} produced unreadable audio: {e}", result.stderr)
    return resample(clip, sample_rate)


def render(score: Score, choice: RendererChoice, sample_rate: int, max_seconds: float | None = None) -> AudioClip:
    if choice.kind == RendererKind.BUILTIN:
        return render_builtin(score, sample_rate, max_seconds)
    clip = render_external(score, choice, sample_rate)
    return crop_audio(clip, max_seconds) if max_seconds is not None else clip
