"""Plot-ready reports over directories of generated or corpus MIDI files."""

import asyncio
import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np
from pydantic import BaseModel

from pianotune.config import RendererChoice, settings
from pianotune.features import (
    VELOCITY_BINS,
    average_piano_roll,
    diversity,
    extract_features,
    per_file_histograms,
    pooled_histograms,
)
from pianotune.models import AestheticScores, FeatureReport, RewardSpec, Score
from pianotune.renderer import render
from pianotune.scorer import RolloutInput, Scorer, ScoreSummary, reward_of, summarize_scores
from pianotune.services.generation_service import load_scores

logger = logging.getLogger(__name__)

SCALAR_FEATURES = (
    "n_notes",
    "polyphony_rate",
    "empty_beat_rate",
    "pitch_range",
    "scale_consistency",
    "velocity_range",
    "mean_velocity",
)


class DirectoryFeatures(BaseModel):
    label: str
    files: Dict[str, FeatureReport]
    means: Dict[str, float]


class FeatureAnalysis(BaseModel):
    directories: List[DirectoryFeatures]

    def histogram_csv(self, kind: str) -> str:
        """Pooled counts and per-file mean shares, one pair of columns per directory.

        `kind` is "pitch" or "velocity".
        """
        if kind not in ("pitch", "velocity"):
            raise ValueError(f"unknown histogram kind {kind!r}")
        size = 128 if kind == "pitch" else VELOCITY_BINS
        columns: List[List[str]] = []
        header = [kind if kind == "pitch" else "velocity_bin"]
        for directory in self.directories:
            reports = list(directory.files.values())
            pooled_pitch, pooled_velocity = pooled_histograms(reports)
            mean_pitch, mean_velocity = per_file_histograms(reports)
            pooled = pooled_pitch if kind == "pitch" else pooled_velocity
            mean = mean_pitch if kind == "pitch" else mean_velocity
            header += [f"{directory.label}_pooled", f"{directory.label}_per_file_mean"]
            columns.append([str(c) for c in pooled])
            columns.append([f"{v:.6g}" for v in mean])

        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(header)
        for i in range(size):
            writer.writerow([i] + [column[i] for column in columns])
        return buffer.getvalue()

    def summary_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["feature", *(d.label for d in self.directories)])
        for name in SCALAR_FEATURES:
            writer.writerow([name, *(f"{d.means[name]:.6g}" for d in self.directories)])
        return buffer.getvalue()


def feature_means(reports: Sequence[FeatureReport]) -> Dict[str, float]:
    if not reports:
        return {name: 0.0 for name in SCALAR_FEATURES}
    return {name: float(np.mean([getattr(r, name) for r in reports])) for name in SCALAR_FEATURES}


def analyze_scores(label: str, scores: Sequence[tuple[str, Score]]) -> DirectoryFeatures:
    files = {name: extract_features(score) for name, score in scores}
    return DirectoryFeatures(label=label, files=files, means=feature_means(list(files.values())))


def analyze_directories(directories: Sequence[tuple[str, Path]]) -> FeatureAnalysis:
    """Features of every file in each labelled directory."""
    results = []
    for label, directory in directories:
        scores = load_scores(directory)
        logger.info("Analyzing %d files in %s as %r", len(scores), directory, label)
        results.append(analyze_scores(label, scores))
    return FeatureAnalysis(directories=results)


class DiversityReport(BaseModel):
    sample_count: int
    diversity: float


def diversity_report(scores: Sequence[Score]) -> tuple[DiversityReport, str]:
    """Diversity scalar and the average piano roll as CSV."""
    roll = average_piano_roll(scores)
    report = DiversityReport(sample_count=len(scores), diversity=diversity(scores))
    return report, roll.to_csv()


class FileRating(BaseModel):
    scores: Dict[str, float]
    mean: float
    reward: float


class ScoringReport(BaseModel):
    files: Dict[str, FileRating]
    summary: ScoreSummary


async def score_scores(
    scores: Sequence[tuple[str, Score]],
    scorer: Scorer,
    renderer: RendererChoice,
    sample_rate: int,
    reward: RewardSpec,
    crop_seconds: float = 10.0,
) -> ScoringReport:
    """Render, crop and rate every score; ratings keyed by file name."""
    if not scores:
        raise ValueError("No MIDI files to score")
    loop = asyncio.get_running_loop()
    with ThreadPoolExecutor(max_workers=settings.render_workers) as pool:
        clips = await asyncio.gather(
            *(loop.run_in_executor(pool, render, score, renderer, sample_rate, crop_seconds) for _, score in scores)
        )
    inputs = {name: RolloutInput(score=score, audio=clip) for (name, score), clip in zip(scores, clips)}
    ratings: Dict[str, AestheticScores] = await scorer.score_batch(inputs)

    files = {
        name: FileRating(scores=ratings[name].to_wire(), mean=ratings[name].mean, reward=reward_of(ratings[name], reward))
        for name, _ in scores
    }
    return ScoringReport(files=files, summary=summarize_scores([ratings[name] for name, _ in scores]))
