"""Standard MIDI File ingestion: parse, write, piano filtering and the corpus gate."""

from __future__ import annotations

import bisect
import io
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Tuple

import mido

from pianotune.errors import MidiParseError
from pianotune.models import (
    FilterReport,
    Note,
    RejectReason,
    Score,
    TempoEvent,
    TimeSignatureEvent,
)

logger = logging.getLogger(__name__)

PERCUSSION_CHANNEL = 9
# General MIDI programs 1-8 (0-7 zero-based) form the piano group.
PIANO_PROGRAMS = range(0, 8)
MAX_NOTES_PER_BAR = 300
MAX_EMPTY_BAR_RATIO = 0.20


@dataclass
class ParsedTrack:
    """Notes of one (track, channel) pair with the program in effect for them."""

    track_index: int
    channel: int
    program: int
    notes: List[Note] = field(default_factory=list)

    @property
    def is_piano(self) -> bool:
        return self.program in PIANO_PROGRAMS


@dataclass
class ParsedMidi:
    """Multi-track parse result, before any merging."""

    ticks_per_quarter: int
    tracks: List[ParsedTrack]
    tempos: List[TempoEvent]
    time_signatures: List[TimeSignatureEvent]

    def merged(self, tracks: List[ParsedTrack] | None = None) -> Score:
        """Merge the given tracks (all by default) into a single-track Score."""
        selected = self.tracks if tracks is None else tracks
        try:
            return Score.build(
                ticks_per_quarter=self.ticks_per_quarter,
                notes=[n for t in selected for n in t.notes],
                tempos=self.tempos,
                time_signatures=self.time_signatures,
            )
        except ValueError as e:
            raise MidiParseError(f"Inconsistent MIDI events: {e}")


def parse_tracks(data: bytes) -> ParsedMidi:
    """Decode SMF format 0/1 bytes into per-(track, channel) note lists.

    Percussion (channel 10) is dropped. Unmatched note-ons are closed at the end of
    their track; zero-length notes are stretched to one tick. Note-offs close the
    oldest open note of their pitch, so nested notes of one pitch on one channel
    cannot be told apart and come back re-paired.
    """
    try:
        midi = mido.MidiFile(file=io.BytesIO(data))
    except (OSError, EOFError, ValueError, KeyError, IndexError, TypeError) as e:
        raise MidiParseError(f"Malformed MIDI data: {e}")

    if midi.type not in (0, 1):
        raise MidiParseError(f"Unsupported SMF format {midi.type}")
    if midi.ticks_per_beat <= 0:
        raise MidiParseError("SMPTE time division is not supported")

    tempos: List[TempoEvent] = []
    time_signatures: List[TimeSignatureEvent] = []
    tracks: List[ParsedTrack] = []

    try:
        for track_index, track in enumerate(midi.tracks):
            tick = 0
            programs: Dict[int, int] = defaultdict(int)
            open_notes: Dict[Tuple[int, int], Deque[Tuple[int, int]]] = defaultdict(deque)
            by_channel: Dict[int, ParsedTrack] = {}

            def close(channel: int, pitch: int, end: int) -> None:
                pending = open_notes.get((channel, pitch))
                if not pending:
                    return
                onset, velocity = pending.popleft()
                channel_track = by_channel.setdefault(
                    channel,
                    ParsedTrack(track_index=track_index, channel=channel, program=programs[channel]),
                )
                channel_track.notes.append(
                    Note(pitch=pitch, velocity=velocity, onset=onset, duration=max(1, end - onset))
                )

            for msg in track:
                tick += msg.time
                if msg.type == "set_tempo":
                    tempos.append(TempoEvent(tick=tick, bpm=mido.tempo2bpm(msg.tempo)))
                elif msg.type == "time_signature":
                    time_signatures.append(
                        TimeSignatureEvent(
                            tick=tick, numerator=msg.numerator, denominator=msg.denominator
                        )
                    )
                elif msg.type == "program_change":
                    programs[msg.channel] = msg.program
                    if msg.channel in by_channel and not by_channel[msg.channel].notes:
                        by_channel[msg.channel].program = msg.program
                elif msg.type == "note_on" and msg.velocity > 0:
                    if msg.channel == PERCUSSION_CHANNEL:
                        continue
                    by_channel.setdefault(
                        msg.channel,
                        ParsedTrack(
                            track_index=track_index, channel=msg.channel, program=programs[msg.channel]
                        ),
                    )
                    open_notes[(msg.channel, msg.note)].append((tick, msg.velocity))
                elif msg.type in ("note_off", "note_on"):
                    if msg.channel != PERCUSSION_CHANNEL:
                        close(msg.channel, msg.note, tick)

            for channel, pitch in list(open_notes):
                while open_notes[(channel, pitch)]:
                    close(channel, pitch, tick)

            tracks.extend(t for _, t in sorted(by_channel.items()) if t.notes)
    except (ValueError, ZeroDivisionError) as e:
        # mido decodes meta events without range checks (zero tempo, zero numerator)
        raise MidiParseError(f"Invalid MIDI event: {e}")

    return ParsedMidi(
        ticks_per_quarter=midi.ticks_per_beat,
        tracks=tracks,
        tempos=tempos,
        time_signatures=time_signatures,
    )


def parse_smf(data: bytes) -> Score:
    """Parse a Standard MIDI File into a Score, merging all non-percussion tracks."""
    return parse_tracks(data).merged()


def write_smf(score: Score) -> bytes:
    """Serialize a Score as a single-track format 0 file.

    At equal ticks meta events come first, then note-offs, then note-ons.
    """
    events: List[Tuple[int, int, int, mido.Message | mido.MetaMessage]] = []
    for seq, ts in enumerate(score.time_signatures):
        events.append(
            (
                ts.tick,
                0,
                seq,
                mido.MetaMessage(
                    "time_signature", numerator=ts.numerator, denominator=ts.denominator
                ),
            )
        )
    for seq, tempo in enumerate(score.tempos):
        events.append(
            (tempo.tick, 1, seq, mido.MetaMessage("set_tempo", tempo=mido.bpm2tempo(tempo.bpm)))
        )
    for seq, note in enumerate(score.notes):
        events.append(
            (note.offset, 2, seq, mido.Message("note_off", note=note.pitch, velocity=0))
        )
        events.append(
            (
                note.onset,
                3,
                seq,
                mido.Message("note_on", note=note.pitch, velocity=note.velocity),
            )
        )
    events.sort(key=lambda e: e[:3])

    track = mido.MidiTrack()
    last_tick = 0
    for tick, _, _, msg in events:
        track.append(msg.copy(time=tick - last_tick))
        last_tick = tick
    track.append(mido.MetaMessage("end_of_track", time=0))

    midi = mido.MidiFile(type=0, ticks_per_beat=score.ticks_per_quarter)
    midi.tracks.append(track)
    buffer = io.BytesIO()
    midi.save(file=buffer)
    return buffer.getvalue()


def filter_and_merge_piano(parsed: ParsedMidi) -> Score | FilterReport:
    """Keep only piano-group tracks and merge them, or reject the file."""
    piano_tracks = [t for t in parsed.tracks if t.is_piano]
    if not piano_tracks:
        programs = sorted({t.program + 1 for t in parsed.tracks})
        return FilterReport(
            accepted=False,
            reason=RejectReason.NO_PIANO_PROGRAM,
            detail=f"programs present: {programs}",
        )
    return parsed.merged(piano_tracks)


def bar_starts(score: Score, until_tick: int) -> List[int]:
    """Ticks of every bar line from 0 up to and including the bar containing `until_tick`.

    Bars restart at every time-signature event; a bar is
    numerator * 4 / denominator * ticks_per_quarter ticks long.
    """
    starts: List[int] = []
    meters = list(score.time_signatures)
    for i, ts in enumerate(meters):
        segment_end = meters[i + 1].tick if i + 1 < len(meters) else None
        bar_len = max(1, round(ts.quarters_per_bar * score.ticks_per_quarter))
        tick = ts.tick
        while (segment_end is None or tick < segment_end) and tick <= until_tick:
            starts.append(tick)
            tick += bar_len
        if segment_end is None or segment_end > until_tick:
            break
    return starts


def corpus_gate(score: Score) -> FilterReport:
    """Reject scores with an overfull bar or too many empty bars.

    Notes count toward the bar of their onset. The empty-bar ratio is taken over
    the bars from the first bar to the last bar containing an onset.
    """
    if not score.notes:
        return FilterReport(accepted=True)

    last_onset = max(n.onset for n in score.notes)
    starts = bar_starts(score, last_onset)
    counts = [0] * len(starts)
    for note in score.notes:
        counts[bisect.bisect_right(starts, note.onset) - 1] += 1

    fullest = max(counts)
    if fullest > MAX_NOTES_PER_BAR:
        return FilterReport(
            accepted=False,
            reason=RejectReason.NOTES_PER_BAR_EXCEEDED,
            detail=f"{fullest} notes in bar {counts.index(fullest) + 1}",
        )

    empty_ratio = counts.count(0) / len(counts)
    if empty_ratio > MAX_EMPTY_BAR_RATIO:
        return FilterReport(
            accepted=False,
            reason=RejectReason.EMPTY_BAR_RATIO_EXCEEDED,
            detail=f"{counts.count(0)} of {len(counts)} bars are empty",
        )
    return FilterReport(accepted=True)


class TempoMap:
    """Converts ticks to seconds under a Score's tempo events."""

    def __init__(self, score: Score) -> None:
        self._ticks = [t.tick for t in score.tempos]
        self._seconds_per_tick = [60.0 / (t.bpm * score.ticks_per_quarter) for t in score.tempos]
        self._offsets = [0.0]
        for i in range(1, len(self._ticks)):
            span = self._ticks[i] - self._ticks[i - 1]
            self._offsets.append(self._offsets[-1] + span * self._seconds_per_tick[i - 1])

    def seconds(self, tick: int) -> float:
        i = bisect.bisect_right(self._ticks, tick) - 1
        return self._offsets[i] + (tick - self._ticks[i]) * self._seconds_per_tick[i]
