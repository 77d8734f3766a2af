"""Note-level features, average piano rolls and output diversity."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import numpy.typing as npt

from pianotune.models import FeatureReport, Score
from pianotune.tokenizer import velocity_bin

POLYPHONY_STEPS_PER_QUARTER = 8
VELOCITY_BINS = 20
ROLL_BEATS = 16
ROLL_STEPS_PER_BEAT = 4

MAJOR_SCALE = (0, 2, 4, 5, 7, 9, 11)
NATURAL_MINOR_SCALE = (0, 2, 3, 5, 7, 8, 10)


def _step_span(onset: int, offset: int, ticks_per_quarter: int, steps_per_quarter: int) -> tuple[int, int]:
    """First and last grid step (inclusive) touched by ticks [onset, offset)."""
    first = steps_per_quarter * onset // ticks_per_quarter
    last = steps_per_quarter * (offset - 1) // ticks_per_quarter
    return first, last


def polyphony_rate(score: Score, steps_per_quarter: int = POLYPHONY_STEPS_PER_QUARTER) -> float:
    """Share of active grid steps where at least two distinct pitches sound."""
    if not score.notes:
        return 0.0
    n_steps = _step_span(0, score.end_tick, score.ticks_per_quarter, steps_per_quarter)[1] + 1
    active = np.zeros((128, n_steps), dtype=bool)
    for note in score.notes:
        first, last = _step_span(note.onset, note.offset, score.ticks_per_quarter, steps_per_quarter)
        active[note.pitch, first : last + 1] = True
    counts = active.sum(axis=0)
    sounding = int(np.count_nonzero(counts >= 1))
    return int(np.count_nonzero(counts >= 2)) / sounding if sounding else 0.0


def empty_beat_rate(score: Score) -> float:
    """Share of quarter-note beats without an onset, from the first onset's beat to the last offset's beat."""
    if not score.notes:
        return 0.0
    tpq = score.ticks_per_quarter
    first_beat = min(n.onset for n in score.notes) // tpq
    last_beat = (score.end_tick - 1) // tpq
    span = last_beat - first_beat + 1
    onset_beats = {n.onset // tpq for n in score.notes}
    return (span - len(onset_beats)) / span


def scale_consistency(score: Score) -> float:
    """Largest share of notes inside one of the 12 major or 12 natural minor scales."""
    if not score.notes:
        return 1.0
    classes = np.bincount([n.pitch % 12 for n in score.notes], minlength=12)
    best = 0
    for root in range(12):
        for scale in (MAJOR_SCALE, NATURAL_MINOR_SCALE):
            best = max(best, int(sum(classes[(root + step) % 12] for step in scale)))
    return best / len(score.notes)


def extract_features(score: Score) -> FeatureReport:
    pitches = [n.pitch for n in score.notes]
    velocities = [n.velocity for n in score.notes]
    pitch_histogram = np.bincount(pitches, minlength=128) if pitches else np.zeros(128, dtype=int)
    velocity_histogram = np.zeros(VELOCITY_BINS, dtype=int)
    for v in velocities:
        velocity_histogram[velocity_bin(v, VELOCITY_BINS)] += 1

    return FeatureReport(
        n_notes=len(score.notes),
        polyphony_rate=polyphony_rate(score),
        empty_beat_rate=empty_beat_rate(score),
        pitch_histogram=[int(c) for c in pitch_histogram],
        pitch_range=max(pitches) - min(pitches) if pitches else 0,
        scale_consistency=scale_consistency(score),
        velocity_histogram=[int(c) for c in velocity_histogram],
        velocity_range=max(velocities) - min(velocities) if velocities else 0,
        mean_velocity=float(np.mean(velocities)) if velocities else 0.0,
    )


def binary_roll(
    score: Score, beats: int = ROLL_BEATS, steps_per_beat: int = ROLL_STEPS_PER_BEAT
) -> npt.NDArray[np.bool_]:
    """128 x (beats * steps_per_beat) grid from tick 0; a cell is set while any note sounds."""
    columns = beats * steps_per_beat
    roll = np.zeros((128, columns), dtype=bool)
    for note in score.notes:
        first, last = _step_span(note.onset, note.offset, score.ticks_per_quarter, steps_per_beat)
        if first < columns:
            roll[note.pitch, first : min(last, columns - 1) + 1] = True
    return roll


@dataclass
class PianoRollSummary:
    matrix: npt.NDArray[np.float64]
    sample_count: int

    def to_csv(self) -> str:
        """One row per pitch (0 first), one column per grid step."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["pitch"] + [f"step_{i}" for i in range(self.matrix.shape[1])])
        for pitch, row in enumerate(self.matrix):
            writer.writerow([pitch] + [f"{v:.6g}" for v in row])
        return buffer.getvalue()


def average_piano_roll(
    scores: Sequence[Score], beats: int = ROLL_BEATS, steps_per_beat: int = ROLL_STEPS_PER_BEAT
) -> PianoRollSummary:
    if not scores:
        raise ValueError("average_piano_roll needs at least one score")
    total = np.zeros((128, beats * steps_per_beat), dtype=np.float64)
    for score in scores:
        total += binary_roll(score, beats, steps_per_beat)
    return PianoRollSummary(matrix=total / len(scores), sample_count=len(scores))


def roll_diversity(rolls: Sequence[npt.NDArray[np.bool_]]) -> float:
    """Mean pairwise share of disagreeing cells."""
    if len(rolls) < 2:
        raise ValueError("diversity needs at least two rolls")
    flat = np.stack([np.asarray(r, dtype=bool).ravel() for r in rolls]).astype(np.float64)
    sizes = flat.sum(axis=1)
    overlap = flat @ flat.T
    distances = sizes[:, None] + sizes[None, :] - 2 * overlap
    upper = np.triu_indices(len(rolls), k=1)
    return float(np.mean(distances[upper]) / flat.shape[1])


def diversity(
    scores: Sequence[Score], beats: int = ROLL_BEATS, steps_per_beat: int = ROLL_STEPS_PER_BEAT
) -> float:
    if len(scores) < 2:
        raise ValueError("diversity needs at least two scores")
    return roll_diversity([binary_roll(s, beats, steps_per_beat) for s in scores])


def pooled_histograms(reports: Sequence[FeatureReport]) -> tuple[List[int], List[int]]:
    """Pitch and velocity histograms summed over all notes of all files."""
    pitch = np.zeros(128, dtype=np.int64)
    velocity = np.zeros(VELOCITY_BINS, dtype=np.int64)
    for report in reports:
        pitch += report.pitch_histogram
        velocity += report.velocity_histogram
    return [int(c) for c in pitch], [int(c) for c in velocity]


def per_file_histograms(reports: Sequence[FeatureReport]) -> tuple[List[float], List[float]]:
    """Mean over files of each file's normalized histogram; empty files are skipped."""
    pitch = np.zeros(128, dtype=np.float64)
    velocity = np.zeros(VELOCITY_BINS, dtype=np.float64)
    counted = 0
    for report in reports:
        if report.n_notes == 0:
            continue
        pitch += np.asarray(report.pitch_histogram, dtype=np.float64) / report.n_notes
        velocity += np.asarray(report.velocity_histogram, dtype=np.float64) / report.n_notes
        counted += 1
    if counted:
        pitch /= counted
        velocity /= counted
    return [float(v) for v in pitch], [float(v) for v in velocity]
