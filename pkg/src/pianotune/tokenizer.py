"""REMI+-style tokenization of single-track piano scores.

A token stream is ``BOS`` followed by one group per bar::

    Bar [TimeSig_n/d] [Tempo_b] (Position_p Pitch_k Velocity_v Duration_d)*

TimeSig and Tempo are emitted in the first bar and afterwards only when they
change. Onsets are quantized to ``steps_per_quarter`` grid steps.
"""

from __future__ import annotations

import bisect
import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from pianotune.config import TokenizerConfig
from pianotune.errors import TokenizationError
from pianotune.models import (
    DEFAULT_BPM,
    DEFAULT_TIME_SIGNATURE,
    Note,
    Score,
    TempoEvent,
    TimeSignatureEvent,
    snap_bpm,
)
from pianotune.utils.common import sha256_hex

logger = logging.getLogger(__name__)

TokenIds = npt.NDArray[np.int64]

PAD_ID = 0
BOS_ID = 1


class TokenKind(str, Enum):
    PAD = "PAD"
    BOS = "BOS"
    BAR = "Bar"
    TIME_SIG = "TimeSig"
    TEMPO = "Tempo"
    POSITION = "Position"
    PITCH = "Pitch"
    VELOCITY = "Velocity"
    DURATION = "Duration"


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True, eq=False)
class Vocab:
    """Immutable token table plus the bin layouts it enumerates."""

    config: TokenizerConfig
    tokens: Tuple[str, ...]
    duration_steps: Tuple[int, ...]
    velocity_members: Tuple[Tuple[int, int], ...]
    index: Dict[str, int] = field(repr=False, compare=False)
    kinds: Tuple[TokenKind, ...] = field(repr=False, compare=False)
    values: Tuple[str, ...] = field(repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise TokenizationError(f"Unknown token {token!r}")

    def token(self, token_id: int) -> str:
        return self.tokens[token_id]

    def kind(self, token_id: int) -> TokenKind:
        return self.kinds[token_id]

    def value(self, token_id: int) -> str:
        return self.values[token_id]

    def ids_of_kind(self, kind: TokenKind) -> List[int]:
        return [i for i, k in enumerate(self.kinds) if k == kind]

    @property
    def fingerprint(self) -> str:
        """Hash of the exact token list; checkpoints and datasets carry it."""
        return sha256_hex(json.dumps(list(self.tokens)))

    # Bin mappings

    def tempo_bin(self, bpm: float) -> int:
        cfg = self.config
        bpm = min(max(bpm, cfg.tempo_min), cfg.tempo_max)
        b = math.floor(cfg.tempo_bins * math.log(bpm / cfg.tempo_min) / math.log(cfg.tempo_max / cfg.tempo_min))
        return min(max(b, 0), cfg.tempo_bins - 1)

    def tempo_value(self, tempo_bin: int) -> float:
        """Geometric center of a tempo bin, on the MIDI tempo grid."""
        cfg = self.config
        return snap_bpm(cfg.tempo_min * (cfg.tempo_max / cfg.tempo_min) ** ((tempo_bin + 0.5) / cfg.tempo_bins))

    def velocity_bin(self, velocity: int) -> int:
        return velocity_bin(velocity, self.config.velocity_bins)

    def velocity_value(self, velocity_bin: int) -> int:
        lo, hi = self.velocity_members[velocity_bin]
        return (lo + hi) // 2

    def duration_bin(self, steps: float) -> int:
        """Index of the nearest duration bin; ties go to the shorter bin."""
        distances = np.abs(np.asarray(self.duration_steps, dtype=np.float64) - steps)
        return int(np.argmin(distances))

    def bar_steps(self, numerator: int, denominator: int) -> int:
        return max(1, _round_half_up(numerator * 4 / denominator * self.config.steps_per_quarter))


def velocity_bin(velocity: int, n_bins: int = 20) -> int:
    """Velocity bin b = floor((v - 1) * n_bins / 127)."""
    velocity = min(max(int(velocity), 1), 127)
    return min((velocity - 1) * n_bins // 127, n_bins - 1)


def build_vocab(config: TokenizerConfig | None = None) -> Vocab:
    """Enumerate every token for `config` in a fixed order, PAD first."""
    config = config or TokenizerConfig()
    spq = config.steps_per_quarter

    entries: List[Tuple[TokenKind, str]] = [
        (TokenKind.PAD, ""),
        (TokenKind.BOS, ""),
        (TokenKind.BAR, ""),
    ]
    entries += [(TokenKind.TIME_SIG, f"{n}/{d}") for n, d in config.time_signatures]
    entries += [(TokenKind.TEMPO, str(b)) for b in range(config.tempo_bins)]

    max_bar = max(_round_half_up(n * 4 / d * spq) for n, d in config.time_signatures)
    entries += [(TokenKind.POSITION, str(p)) for p in range(max_bar)]
    entries += [(TokenKind.PITCH, str(p)) for p in range(config.pitch_min, config.pitch_max + 1)]
    entries += [(TokenKind.VELOCITY, str(b)) for b in range(config.velocity_bins)]

    durations = list(range(1, config.fine_duration_quarters * spq + 1))
    durations += [q * spq for q in range(config.fine_duration_quarters + 1, config.max_duration_quarters + 1)]
    entries += [(TokenKind.DURATION, str(i)) for i in range(len(durations))]

    members: List[Tuple[int, int]] = []
    for b in range(config.velocity_bins):
        in_bin = [v for v in range(1, 128) if velocity_bin(v, config.velocity_bins) == b]
        if not in_bin:
            raise TokenizationError(f"Velocity bin {b} is empty")
        members.append((in_bin[0], in_bin[-1]))

    tokens = tuple(kind.value if not value else f"{kind.value}_{value}" for kind, value in entries)
    if len(set(tokens)) != len(tokens):
        raise TokenizationError("Vocabulary contains duplicate tokens")

    return Vocab(
        config=config,
        tokens=tokens,
        duration_steps=tuple(durations),
        velocity_members=tuple(members),
        index={t: i for i, t in enumerate(tokens)},
        kinds=tuple(kind for kind, _ in entries),
        values=tuple(value for _, value in entries),
    )


def _supported_meter(vocab: Vocab, ts: TimeSignatureEvent) -> Tuple[int, int]:
    meter = (ts.numerator, ts.denominator)
    if meter not in vocab.config.time_signatures:
        logger.debug("Unsupported meter %s/%s replaced by 4/4", *meter)
        return DEFAULT_TIME_SIGNATURE
    return meter


def encode(score: Score, vocab: Vocab) -> TokenIds:
    """Tokenize a Score; pitches outside the vocabulary range are clamped to its edges."""
    cfg = vocab.config
    spq = cfg.steps_per_quarter
    to_steps = spq / score.ticks_per_quarter

    notes = sorted(
        (
            (
                _round_half_up(n.onset * to_steps),
                min(max(n.pitch, cfg.pitch_min), cfg.pitch_max),
                vocab.velocity_bin(n.velocity),
                vocab.duration_bin(n.duration * to_steps),
            )
            for n in score.notes
        )
    )
    last_onset = notes[-1][0] if notes else 0

    meter_steps = [_round_half_up(ts.tick * to_steps) for ts in score.time_signatures]
    meters = [_supported_meter(vocab, ts) for ts in score.time_signatures]
    tempo_steps = [_round_half_up(t.tick * to_steps) for t in score.tempos]
    tempo_bins = [vocab.tempo_bin(t.bpm) for t in score.tempos]

    ids: List[int] = [BOS_ID]
    bar_start = 0
    note_i = 0
    prev_meter: Tuple[int, int] | None = None
    prev_tempo: int | None = None
    while True:
        # Meter changes inside a bar take effect at the next bar line.
        meter = meters[bisect.bisect_right(meter_steps, bar_start) - 1]
        tempo = tempo_bins[bisect.bisect_right(tempo_steps, bar_start) - 1]
        bar_len = vocab.bar_steps(*meter)

        ids.append(vocab.id("Bar"))
        if meter != prev_meter:
            ids.append(vocab.id(f"TimeSig_{meter[0]}/{meter[1]}"))
            prev_meter = meter
        if tempo != prev_tempo:
            ids.append(vocab.id(f"Tempo_{tempo}"))
            prev_tempo = tempo

        bar_end = bar_start + bar_len
        while note_i < len(notes) and notes[note_i][0] < bar_end:
            onset, pitch, vel_bin, dur_bin = notes[note_i]
            ids.extend(
                (
                    vocab.id(f"Position_{onset - bar_start}"),
                    vocab.id(f"Pitch_{pitch}"),
                    vocab.id(f"Velocity_{vel_bin}"),
                    vocab.id(f"Duration_{dur_bin}"),
                )
            )
            note_i += 1

        if bar_end > last_onset:
            break
        bar_start = bar_end

    return np.asarray(ids, dtype=np.int64)


def decode(tokens: Sequence[int] | TokenIds, vocab: Vocab) -> Score:
    """Best-effort inverse of `encode`; total over any sequence of valid ids.

    A Pitch token must be immediately followed by Velocity and Duration tokens,
    otherwise it is dropped. PAD, BOS and out-of-place tokens are skipped.
    """
    cfg = vocab.config
    tpq = cfg.ticks_per_quarter
    ticks_per_step = tpq / cfg.steps_per_quarter
    ids = [int(t) for t in tokens]
    n_vocab = len(vocab)

    notes: List[Note] = []
    tempos: List[TempoEvent] = [TempoEvent(tick=0, bpm=DEFAULT_BPM)]
    meters: List[TimeSignatureEvent] = []
    bar_start: int | None = None
    bar_len = vocab.bar_steps(*DEFAULT_TIME_SIGNATURE)
    position = 0

    i = 0
    while i < len(ids):
        tid = ids[i]
        i += 1
        if not 0 <= tid < n_vocab:
            continue
        kind = vocab.kind(tid)
        value = vocab.value(tid)

        if kind == TokenKind.BAR:
            bar_start = 0 if bar_start is None else bar_start + bar_len
            position = 0
        elif kind == TokenKind.TIME_SIG:
            numerator, denominator = (int(x) for x in value.split("/"))
            bar_len = vocab.bar_steps(numerator, denominator)
            tick = _round_half_up((bar_start or 0) * ticks_per_step)
            meters.append(TimeSignatureEvent(tick=tick, numerator=numerator, denominator=denominator))
        elif kind == TokenKind.TEMPO:
            tick = _round_half_up((bar_start or 0) * ticks_per_step)
            tempos.append(TempoEvent(tick=tick, bpm=vocab.tempo_value(int(value))))
        elif kind == TokenKind.POSITION:
            position = int(value)
        elif kind == TokenKind.PITCH:
            if (
                i + 1 < len(ids)
                and 0 <= ids[i] < n_vocab
                and 0 <= ids[i + 1] < n_vocab
                and vocab.kind(ids[i]) == TokenKind.VELOCITY
                and vocab.kind(ids[i + 1]) == TokenKind.DURATION
            ):
                velocity = vocab.velocity_value(int(vocab.value(ids[i])))
                steps = vocab.duration_steps[int(vocab.value(ids[i + 1]))]
                onset_steps = (bar_start or 0) + position
                notes.append(
                    Note(
                        pitch=int(value),
                        velocity=velocity,
                        onset=_round_half_up(onset_steps * ticks_per_step),
                        duration=max(1, _round_half_up(steps * ticks_per_step)),
                    )
                )
                i += 2

    return Score.build(ticks_per_quarter=tpq, notes=notes, tempos=tempos, time_signatures=meters)


def random_crop(tokens: Sequence[int] | TokenIds, max_len: int, rng: np.random.Generator) -> TokenIds:
    """Uniform contiguous window of at most `max_len` tokens, right-padded with PAD."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    ids = np.asarray(tokens, dtype=np.int64)
    if len(ids) > max_len:
        offset = int(rng.integers(0, len(ids) - max_len + 1))
        ids = ids[offset : offset + max_len]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out
