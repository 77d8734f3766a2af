"""Rate the same scores through several renderers, one table row per renderer."""

from __future__ import annotations

import asyncio
import csv
import io
import logging
from typing import Dict, List, Sequence

import numpy as np
from pydantic import BaseModel, Field

from pianotune.config import RendererChoice
from pianotune.errors import PianotuneError
from pianotune.models import AestheticScores, Score, ScoreAxis
from pianotune.renderer import render
from pianotune.scorer.base import RolloutInput, Scorer

logger = logging.getLogger(__name__)


class RendererRow(BaseModel):
    renderer: str
    means: Dict[str, float | None] = Field(description="Per-axis mean keyed by CE/CU/PC/PQ")
    overall_mean: float | None = None
    ok: int = 0
    failed: int = 0
    errors: List[str] = Field(default_factory=list)


class RendererComparison(BaseModel):
    rows: List[RendererRow]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        axes = [a.short_name for a in ScoreAxis]
        writer.writerow(["renderer", *axes, "mean", "ok", "failed"])
        for row in self.rows:
            cells = ["" if row.means[a] is None else f"{row.means[a]:.3f}" for a in axes]
            overall = "" if row.overall_mean is None else f"{row.overall_mean:.3f}"
            writer.writerow([row.renderer, *cells, overall, row.ok, row.failed])
        return buffer.getvalue()


async def compare_renderers(
    scores: Sequence[Score],
    renderers: Sequence[RendererChoice],
    scorer: Scorer,
    sample_rate: int,
    crop_seconds: float = 10.0,
) -> RendererComparison:
    """Render every score with every renderer, score the clips and average per axis.

    A failed render or rating marks that cell as failed; the row mean is taken over
    the remaining cells.
    """
    if not scores or not renderers:
        raise ValueError("compare_renderers needs at least one score and one renderer")

    loop = asyncio.get_running_loop()
    rows: List[RendererRow] = []
    for choice in renderers:
        row = RendererRow(renderer=choice.name, means={a.short_name: None for a in ScoreAxis})
        rated: List[AestheticScores] = []
        for index, score in enumerate(scores):
            try:
                clip = await loop.run_in_executor(None, render, score, choice, sample_rate, crop_seconds)
                result = await scorer.score_batch({str(index): RolloutInput(score=score, audio=clip)})
                rated.append(result[str(index)])
                row.ok += 1
            except PianotuneError as e:
                logger.warning("Renderer %s failed on sample %d: %s", choice.name, index, e)
                row.failed += 1
                row.errors.append(f"sample {index}: {e}")
        if rated:
            row.means = {a.short_name: float(np.mean([r.axis(a) for r in rated])) for a in ScoreAxis}
            row.overall_mean = float(np.mean([r.mean for r in rated]))
        rows.append(row)
    return RendererComparison(rows=rows)
