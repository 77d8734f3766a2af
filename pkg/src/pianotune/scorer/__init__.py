"""Aesthetic scorers: the remote HTTP client and the offline proxy."""

from __future__ import annotations

from pianotune.config import PipelineConfig
from pianotune.models import ScorerKind
from pianotune.scorer.base import RolloutInput, Scorer, ScoreSummary, reward_of, summarize_scores
from pianotune.scorer.proxy import ProxyScorer, score_proxy
from pianotune.scorer.remote import RemoteScorer


def build_scorer(config: PipelineConfig) -> Scorer:
    """The scorer named by the reward spec. Call from inside the event loop that will use it."""
    if config.reward.scorer == ScorerKind.REMOTE:
        return RemoteScorer(config.remote_scorer)
    return ProxyScorer()


__all__ = [
    "ProxyScorer",
    "RemoteScorer",
    "RolloutInput",
    "ScoreSummary",
    "Scorer",
    "build_scorer",
    "reward_of",
    "score_proxy",
    "summarize_scores",
]
