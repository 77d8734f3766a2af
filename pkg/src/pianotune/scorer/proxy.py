"""Deterministic offline stand-in for the aesthetic model.

Content enjoyment is a capped weighted sum of symbolic features, gated by an
audio silence check. The weights are declared constants, not fitted values.
"""

from __future__ import annotations

from typing import Dict, Mapping

from pianotune.audio import is_silent
from pianotune.features import extract_features
from pianotune.models import AestheticScores, FeatureReport
from pianotune.scorer.base import RolloutInput

NOTES_CAP = 70
PITCH_RANGE_CAP = 48
VELOCITY_RANGE_CAP = 40

W_NOTES = 0.30
W_POLYPHONY = 0.20
W_FILLED_BEATS = 0.20
W_PITCH_RANGE = 0.15
W_VELOCITY_RANGE = 0.15

SILENT_RATING = 1.0
FIXED_QUALITY = 7.0


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(max(x, lo), hi)


def proxy_from_features(features: FeatureReport) -> AestheticScores:
    f1 = min(features.n_notes / NOTES_CAP, 1.0)
    f2 = features.polyphony_rate
    f3 = 1.0 - features.empty_beat_rate
    f4 = min(features.pitch_range / PITCH_RANGE_CAP, 1.0)
    f5 = min(features.velocity_range / VELOCITY_RANGE_CAP, 1.0)

    weighted = W_NOTES * f1 + W_POLYPHONY * f2 + W_FILLED_BEATS * f3 + W_PITCH_RANGE * f4 + W_VELOCITY_RANGE * f5
    enjoyment = _clamp(1.0 + 9.0 * weighted, 1.0, 10.0)
    return AestheticScores(
        content_enjoyment=enjoyment,
        content_usefulness=_clamp(0.5 + 0.9 * enjoyment, 0.0, 10.0),
        production_complexity=1.0 + 2.0 * f2,
        production_quality=FIXED_QUALITY,
    )


def score_proxy(rollout: RolloutInput) -> AestheticScores:
    if is_silent(rollout.audio):
        return AestheticScores(
            content_enjoyment=SILENT_RATING,
            content_usefulness=SILENT_RATING,
            production_complexity=SILENT_RATING,
            production_quality=SILENT_RATING,
        )
    return proxy_from_features(extract_features(rollout.score))


class ProxyScorer:
    async def score_batch(self, inputs: Mapping[str, RolloutInput]) -> Dict[str, AestheticScores]:
        return {rollout_id: score_proxy(rollout) for rollout_id, rollout in inputs.items()}
