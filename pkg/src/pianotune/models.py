from __future__ import annotations

import math
from enum import Enum
from typing import Iterable, List

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

DEFAULT_BPM = 120.0
DEFAULT_TIME_SIGNATURE = (4, 4)
MICROSECONDS_PER_MINUTE = 60_000_000
# set_tempo carries microseconds per quarter in three bytes
MAX_TEMPO_MICROSECONDS = 0xFFFFFF


class Note(BaseModel):
    """A single note event in ticks."""

    model_config = ConfigDict(frozen=True)

    pitch: int = Field(ge=0, le=127)
    velocity: int = Field(ge=1, le=127)
    onset: int = Field(ge=0)
    duration: int = Field(ge=1)

    @property
    def offset(self) -> int:
        return self.onset + self.duration


def snap_bpm(bpm: float) -> float:
    """Nearest bpm a set_tempo event can carry exactly (whole microseconds per quarter)."""
    micros = min(max(round(MICROSECONDS_PER_MINUTE / bpm), 1), MAX_TEMPO_MICROSECONDS)
    return MICROSECONDS_PER_MINUTE / micros


class TempoEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    tick: int = Field(ge=0)
    bpm: float = Field(gt=0)

    @field_validator("bpm")
    @classmethod
    def snap_to_midi_grid(cls, v: float) -> float:
        return snap_bpm(v)


class TimeSignatureEvent(BaseModel):
    model_config = ConfigDict(frozen=True)

    tick: int = Field(ge=0)
    numerator: int = Field(ge=1)
    denominator: int = Field(ge=1)

    @field_validator("denominator")
    @classmethod
    def validate_power_of_two(cls, v: int) -> int:
        if v & (v - 1):
            raise ValueError(f"time signature denominator must be a power of two, got {v}")
        return v

    @property
    def quarters_per_bar(self) -> float:
        return self.numerator * 4 / self.denominator

    @property
    def label(self) -> str:
        return f"{self.numerator}/{self.denominator}"


def _note_order(note: Note) -> tuple[int, int, int, int]:
    return (note.onset, note.pitch, note.duration, -note.velocity)


class Score(BaseModel):
    """Symbolic music on a single merged track.

    Use `Score.build` to construct from unsorted or incomplete event lists; the
    constructor itself only accepts already normalized data.
    """

    model_config = ConfigDict(frozen=True)

    ticks_per_quarter: int = Field(gt=0)
    notes: tuple[Note, ...] = ()
    tempos: tuple[TempoEvent, ...]
    time_signatures: tuple[TimeSignatureEvent, ...]

    @model_validator(mode="after")
    def check_normalized(self) -> "Score":
        keys = [_note_order(n) for n in self.notes]
        if keys != sorted(keys):
            raise ValueError("notes must be sorted by (onset, pitch)")
        identities = {(n.onset, n.pitch, n.duration) for n in self.notes}
        if len(identities) != len(self.notes):
            raise ValueError("duplicate notes with identical onset, pitch and duration")
        for name, events in (("tempo", self.tempos), ("time signature", self.time_signatures)):
            if not events or events[0].tick != 0:
                raise ValueError(f"a {name} event at tick 0 is required")
            ticks = [e.tick for e in events]
            if any(b <= a for a, b in zip(ticks, ticks[1:])):
                raise ValueError(f"{name} events must have strictly increasing ticks")
        return self

    @classmethod
    def build(
        cls,
        ticks_per_quarter: int,
        notes: Iterable[Note] = (),
        tempos: Iterable[TempoEvent] = (),
        time_signatures: Iterable[TimeSignatureEvent] = (),
    ) -> "Score":
        """Normalize raw events into a valid Score.

        Notes are sorted and deduplicated on (onset, pitch, duration), keeping the
        loudest copy. Tempo and meter events are sorted by tick (the last event at a
        tick wins), consecutive repeats are dropped, and 120 bpm / 4/4 are injected
        at tick 0 when missing.
        """
        unique: dict[tuple[int, int, int], Note] = {}
        for note in sorted(notes, key=_note_order):
            unique.setdefault((note.onset, note.pitch, note.duration), note)

        tempo_by_tick: dict[int, float] = {}
        for tempo in sorted(tempos, key=lambda t: t.tick):
            tempo_by_tick[tempo.tick] = tempo.bpm
        tempo_by_tick.setdefault(0, DEFAULT_BPM)
        tempo_events: List[TempoEvent] = []
        for tick in sorted(tempo_by_tick):
            if tempo_events and tempo_events[-1].bpm == tempo_by_tick[tick]:
                continue
            tempo_events.append(TempoEvent(tick=tick, bpm=tempo_by_tick[tick]))

        meter_by_tick: dict[int, tuple[int, int]] = {}
        for ts in sorted(time_signatures, key=lambda t: t.tick):
            meter_by_tick[ts.tick] = (ts.numerator, ts.denominator)
        meter_by_tick.setdefault(0, DEFAULT_TIME_SIGNATURE)
        meter_events: List[TimeSignatureEvent] = []
        for tick in sorted(meter_by_tick):
            numerator, denominator = meter_by_tick[tick]
            if meter_events and (meter_events[-1].numerator, meter_events[-1].denominator) == (
                numerator,
                denominator,
            ):
                continue
            meter_events.append(
                TimeSignatureEvent(tick=tick, numerator=numerator, denominator=denominator)
            )

        return cls(
            ticks_per_quarter=ticks_per_quarter,
            notes=tuple(unique.values()),
            tempos=tuple(tempo_events),
            time_signatures=tuple(meter_events),
        )

    @property
    def end_tick(self) -> int:
        """Tick of the last note offset (0 for an empty score)."""
        return max((n.offset for n in self.notes), default=0)


class RejectReason(str, Enum):
    """Why a MIDI file was excluded from the corpus."""

    NO_PIANO_PROGRAM = "no-piano-program"
    NOTES_PER_BAR_EXCEEDED = "notes-per-bar-exceeded"
    EMPTY_BAR_RATIO_EXCEEDED = "empty-bar-ratio-exceeded"
    PARSE_ERROR = "parse-error"


class FilterReport(BaseModel):
    accepted: bool
    reason: RejectReason | None = None
    detail: str | None = None

    @model_validator(mode="after")
    def check_reason(self) -> "FilterReport":
        if self.accepted == (self.reason is not None):
            raise ValueError("reason must be present exactly when the file is rejected")
        return self


class ScoreAxis(str, Enum):
    """The four aesthetic rating axes."""

    CONTENT_ENJOYMENT = "content_enjoyment"
    CONTENT_USEFULNESS = "content_usefulness"
    PRODUCTION_COMPLEXITY = "production_complexity"
    PRODUCTION_QUALITY = "production_quality"

    @property
    def short_name(self) -> str:
        return {
            ScoreAxis.CONTENT_ENJOYMENT: "CE",
            ScoreAxis.CONTENT_USEFULNESS: "CU",
            ScoreAxis.PRODUCTION_COMPLEXITY: "PC",
            ScoreAxis.PRODUCTION_QUALITY: "PQ",
        }[self]


class AestheticScores(BaseModel):
    """Ratings on the 10-point scale; accepts both long names and CE/CU/PC/PQ keys."""

    model_config = ConfigDict(frozen=True, populate_by_name=True)

    content_enjoyment: float = Field(ge=0, le=10, validation_alias="CE")
    content_usefulness: float = Field(ge=0, le=10, validation_alias="CU")
    production_complexity: float = Field(ge=0, le=10, validation_alias="PC")
    production_quality: float = Field(ge=0, le=10, validation_alias="PQ")

    @field_validator("*")
    @classmethod
    def validate_finite(cls, v: float) -> float:
        if not math.isfinite(v):
            raise ValueError("scores must be finite")
        return v

    def axis(self, axis: ScoreAxis) -> float:
        return float(getattr(self, axis.value))

    @property
    def mean(self) -> float:
        """Mean over the four axes."""
        return sum(self.axis(a) for a in ScoreAxis) / len(ScoreAxis)

    def to_wire(self) -> dict[str, float]:
        return {a.short_name: self.axis(a) for a in ScoreAxis}


class ScorerKind(str, Enum):
    REMOTE = "remote"
    PROXY = "proxy"


class RewardSpec(BaseModel):
    """Which rating axis is the reward, and who produces the ratings."""

    axis: ScoreAxis = ScoreAxis.CONTENT_ENJOYMENT
    scorer: ScorerKind = ScorerKind.PROXY


class FeatureReport(BaseModel):
    """Note-level features of one score."""

    n_notes: int = Field(ge=0)
    polyphony_rate: float = Field(ge=0, le=1)
    empty_beat_rate: float = Field(ge=0, le=1)
    pitch_histogram: List[int] = Field(min_length=128, max_length=128)
    pitch_range: int = Field(ge=0)
    scale_consistency: float = Field(ge=0, le=1)
    velocity_histogram: List[int] = Field(min_length=20, max_length=20)
    velocity_range: int = Field(ge=0)
    mean_velocity: float = Field(default=0.0, ge=0)

    @model_validator(mode="after")
    def check_mass(self) -> "FeatureReport":
        if sum(self.pitch_histogram) != self.n_notes or sum(self.velocity_histogram) != self.n_notes:
            raise ValueError("histogram mass must equal n_notes")
        return self
