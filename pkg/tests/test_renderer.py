"""Tests for the builtin synth and the external renderer hook."""

import stat
import sys
import textwrap
from pathlib import Path

import numpy as np
import pytest

from pianotune.audio import is_silent
from pianotune.config import RendererChoice, RendererKind
from pianotune.errors import RenderError
from pianotune.models import Note, Score, TempoEvent
from pianotune.renderer import (
    RELEASE_SECONDS,
    release_samples,
    render,
    render_builtin,
    render_external,
    score_duration_seconds,
)

FAKE_RENDERER = textwrap.dedent(
    """
    import sys
    import wave

    import numpy as np

    midi_path, soundfont, out_path = sys.argv[1:4]
    if open(soundfont).read().strip() == "fail":
        sys.stderr.write("soundfont is broken")
        sys.exit(3)
    rate = 44100
    t = np.arange(rate) / rate
    tone = (0.25 * np.sin(2 * np.pi * 220 * t) * 32767).astype("<i2")
    with wave.open(out_path, "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(rate)
        w.writeframes(np.repeat(tone, 2).tobytes())
    """
)


def _make_renderer(directory: Path, soundfont_text: str = "ok") -> RendererChoice:
    script = directory / "fake_renderer.py"
    script.write_text(FAKE_RENDERER)
    executable = directory / "fake-renderer"
    executable.write_text(f'#!/bin/sh\nexec "{sys.executable}" "{script}" "$@"\n')
    executable.chmod(executable.stat().st_mode | stat.S_IEXEC)
    soundfont = directory / "piano.sf2"
    soundfont.write_text(soundfont_text)
    return RendererChoice(kind=RendererKind.EXTERNAL, name="fake", executable=executable, soundfont=soundfont)


def _score(*notes: tuple[int, int, int, int], bpm: float = 120.0) -> Score:
    return Score.build(
        ticks_per_quarter=480,
        notes=[Note(pitch=p, velocity=v, onset=o, duration=d) for p, v, o, d in notes],
        tempos=[TempoEvent(tick=0, bpm=bpm)],
    )


class TestBuiltin:
    def test_length_follows_last_offset(self) -> None:
        score = _score((60, 100, 0, 960), (64, 100, 480, 1440))
        clip = render_builtin(score, 22050)
        assert score_duration_seconds(score) == pytest.approx(2.0)
        assert len(clip) == 44100 + release_samples(22050)
        assert release_samples(22050) == pytest.approx(RELEASE_SECONDS * 22050, abs=1)

    def test_release_tail_fades_to_silence(self) -> None:
        clip = render_builtin(_score((69, 127, 0, 960)), 22050)
        tail = clip.samples[44100:]
        assert len(tail) == release_samples(22050)
        assert np.abs(tail[: len(tail) // 4]).max() > 0
        assert np.abs(tail[-10:]).max() < np.abs(clip.samples[44000:44100]).max()

    def test_empty_score_renders_empty_clip(self) -> None:
        assert len(render_builtin(Score.build(ticks_per_quarter=480), 22050)) == 0

    def test_deterministic(self) -> None:
        score = _score((60, 100, 0, 480), (67, 60, 240, 480))
        np.testing.assert_array_equal(render_builtin(score, 22050).samples, render_builtin(score, 22050).samples)

    def test_max_seconds_equals_crop_of_full_render(self) -> None:
        score = _score(*((60 + i % 12, 90, i * 240, 480) for i in range(100)))
        full = render_builtin(score, 16000)
        cropped = render_builtin(score, 16000, max_seconds=3.0)
        assert len(cropped) == 48000
        np.testing.assert_array_equal(cropped.samples, full.samples[:48000])

    def test_output_is_bounded_and_audible(self) -> None:
        chord = _score(*((p, 127, 0, 1920) for p in range(40, 90)))
        clip = render_builtin(chord, 22050)
        assert np.max(np.abs(clip.samples)) <= 1.0
        assert not is_silent(clip)

    def test_limiter_holds_for_300_note_chord(self) -> None:
        # 88 keys, several layered onsets inside the first beat
        notes = [(21 + i % 88, 127, (i // 88) * 5, 1920) for i in range(300)]
        clip = render_builtin(_score(*notes), 22050)
        assert np.all(np.isfinite(clip.samples))
        assert np.max(np.abs(clip.samples)) <= 1.0
        assert not is_silent(clip)

    def test_louder_notes_render_louder(self) -> None:
        soft = render_builtin(_score((60, 30, 0, 960)), 22050)
        loud = render_builtin(_score((60, 120, 0, 960)), 22050)
        assert np.abs(loud.samples).max() > np.abs(soft.samples).max()

    def test_note_is_silent_after_its_release(self) -> None:
        score = _score((60, 100, 0, 480), (90, 1, 1900, 20))
        clip = render_builtin(score, 22050)
        gap = clip.samples[int(0.5 * 22050) + release_samples(22050) + 1 : int(1.9 * 22050 / 2)]
        assert np.all(gap == 0)

    def test_tempo_scales_duration(self) -> None:
        score = _score((60, 100, 0, 1920), bpm=60.0)
        assert len(render_builtin(score, 22050)) == 4 * 22050 + release_samples(22050)

    def test_doubling_tempo_halves_gated_duration(self) -> None:
        notes = ((60, 100, 0, 1920), (67, 90, 960, 1440))
        slow = len(render_builtin(_score(*notes, bpm=75.0), 22050)) - release_samples(22050)
        fast = len(render_builtin(_score(*notes, bpm=150.0), 22050)) - release_samples(22050)
        assert abs(slow - 2 * fast) <= 1

    def test_a4_peaks_at_440_hz(self) -> None:
        clip = render_builtin(_score((69, 100, 0, 1920)), 22050)
        spectrum = np.abs(np.fft.rfft(clip.samples))
        freqs = np.fft.rfftfreq(len(clip.samples), d=1 / 22050)
        bin_width = freqs[1]
        assert abs(freqs[int(np.argmax(spectrum))] - 440.0) <= bin_width


class TestExternal:
    def test_renders_and_resamples(self, temp_dir: Path) -> None:
        choice = _make_renderer(temp_dir)
        clip = render_external(_score((60, 100, 0, 480)), choice, 22050)
        assert clip.sample_rate == 22050
        assert len(clip) == 22050
        assert not is_silent(clip)

    def test_render_crops_external_output(self, temp_dir: Path) -> None:
        choice = _make_renderer(temp_dir)
        clip = render(_score((60, 100, 0, 480)), choice, 22050, max_seconds=0.5)
        assert len(clip) == 11025

    def test_failure_carries_diagnostics(self, temp_dir: Path) -> None:
        choice = _make_renderer(temp_dir, soundfont_text="fail")
        with pytest.raises(RenderError) as excinfo:
            render_external(_score((60, 100, 0, 480)), choice, 22050)
        assert "soundfont is broken" in (excinfo.value.diagnostics or "")
        assert excinfo.value.to_dict()["error_code"] == "render_error"
