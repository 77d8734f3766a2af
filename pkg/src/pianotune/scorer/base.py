from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, Field

from pianotune.audio import AudioClip
from pianotune.models import AestheticScores, RewardSpec, Score, ScoreAxis

MAX_AUDIO_SECONDS = 10.0


@dataclass(frozen=True)
class RolloutInput:
    """What a scorer sees for one rollout: the symbolic score and its rendered audio."""

    score: Score
    audio: AudioClip

    def __post_init__(self) -> None:
        if len(self.audio) > math.floor(MAX_AUDIO_SECONDS * self.audio.sample_rate) + 1:
            raise ValueError(f"Rollout audio is longer than {MAX_AUDIO_SECONDS} s")


class Scorer(Protocol):
    """Rates a batch of rollouts; results are keyed by rollout id, never by order."""

    async def score_batch(self, inputs: Mapping[str, RolloutInput]) -> Dict[str, AestheticScores]: ...


def reward_of(scores: AestheticScores, spec: RewardSpec) -> float:
    return scores.axis(spec.axis)


class AxisSummary(BaseModel):
    mean: float
    std: float
    histogram: List[int] = Field(description="Counts over ten unit-wide bins covering [0, 10]")


class ScoreSummary(BaseModel):
    count: int
    axes: Dict[str, AxisSummary]
    overall_mean: float


def summarize_scores(scores: Sequence[AestheticScores]) -> ScoreSummary:
    """Per-axis mean, population std and histogram over a set of ratings."""
    if not scores:
        raise ValueError("Cannot summarize an empty set of scores")
    axes: Dict[str, AxisSummary] = {}
    for axis in ScoreAxis:
        values = np.array([s.axis(axis) for s in scores], dtype=np.float64)
        counts, _ = np.histogram(values, bins=10, range=(0.0, 10.0))
        axes[axis.short_name] = AxisSummary(
            mean=float(values.mean()),
            std=float(values.std()),
            histogram=[int(c) for c in counts],
        )
    return ScoreSummary(
        count=len(scores),
        axes=axes,
        overall_mean=float(np.mean([s.mean for s in scores])),
    )
