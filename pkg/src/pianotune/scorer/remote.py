"""HTTP client for a remote aesthetic scorer.

Protocol: ``POST {base_url}/score`` with the WAV bytes as body
(``Content-Type: audio/wav``), answered by ``{"CE": x, "CU": x, "PC": x, "PQ": x}``.
"""

from __future__ import annotations

import asyncio
import logging
import time
from typing import Dict, Mapping

import httpx
from pydantic import ValidationError

from pianotune.audio import AudioClip, write_wav
from pianotune.config import RemoteScorerConfig
from pianotune.errors import MalformedScoreResponse, ScorerError, ScorerStatusError, ScorerTimeoutError
from pianotune.models import AestheticScores
from pianotune.scorer.base import RolloutInput

logger = logging.getLogger(__name__)

RETRYABLE_STATUS = {429, 500, 502, 503, 504}


def parse_score_response(response: httpx.Response) -> AestheticScores:
    try:
        payload = response.json()
    except ValueError as e:
        raise MalformedScoreResponse(f"Scorer response is not JSON: {e}")
    if not isinstance(payload, dict):
        raise MalformedScoreResponse(f"Scorer response must be a JSON object, got {type(payload).__name__}")
    try:
        return AestheticScores.model_validate(payload)
    except ValidationError as e:
        raise MalformedScoreResponse(f"Scorer response has missing or invalid fields: {e}")


class RemoteScorer:
    """Scores audio over HTTP with retries, backoff, and an in-flight limit.

    A single call never takes longer than timeout * (max_retries + 1).
    """

    def __init__(self, config: RemoteScorerConfig, transport: httpx.AsyncBaseTransport | None = None) -> None:
        self.config = config
        self._timeout_s = config.timeout_ms / 1000
        headers = {}
        if config.token is not None:
            headers["Authorization"] = f"Bearer {config.token.get_secret_value()}"
        self._client = httpx.AsyncClient(
            base_url=config.base_url.rstrip("/"),
            timeout=httpx.Timeout(self._timeout_s),
            headers=headers,
            transport=transport,
        )
        self._slots = asyncio.Semaphore(config.max_in_flight)
        self.attempts = 0

    async def __aenter__(self) -> "RemoteScorer":
        return self

    async def __aexit__(self, *exc_info: object) -> None:
        await self.aclose()

    async def aclose(self) -> None:
        await self._client.aclose()

    async def _attempt(self, body: bytes) -> AestheticScores:
        self.attempts += 1
        response = await self._client.post("/score", content=body, headers={"Content-Type": "audio/wav"})
        if response.status_code >= 300:
            raise ScorerStatusError(response.status_code, response.text)
        return parse_score_response(response)

    async def score(self, audio: AudioClip) -> AestheticScores:
        body = write_wav(audio)
        deadline = self._timeout_s * (self.config.max_retries + 1)
        started = time.monotonic()
        last_error: ScorerError | None = None

        async with self._slots:
            try:
                async with asyncio.timeout(deadline):
                    for attempt in range(self.config.max_retries + 1):
                        if attempt:
                            delay = self.config.backoff_ms / 1000 * 2 ** (attempt - 1)
                            remaining = deadline - (time.monotonic() - started)
                            await asyncio.sleep(max(0.0, min(delay, remaining - 0.001)))
                        try:
                            scores = await self._attempt(body)
                            logger.debug("Scored clip after %d attempt(s)", attempt + 1)
                            return scores
                        except ScorerStatusError as e:
                            if e.status_code not in RETRYABLE_STATUS:
                                raise
                            last_error = e
                        except httpx.TimeoutException as e:
                            last_error = ScorerTimeoutError(f"Scorer request timed out after {self._timeout_s}s: {e}")
                        except httpx.TransportError as e:
                            last_error = ScorerError(f"Scorer connection failed: {e}")
                        logger.warning(
                            "Scorer attempt %d/%d failed: %s", attempt + 1, self.config.max_retries + 1, last_error
                        )
            except TimeoutError:
                raise ScorerTimeoutError(f"Scorer did not answer within {deadline:.3f}s")

        assert last_error is not None
        raise last_error

    async def score_batch(self, inputs: Mapping[str, RolloutInput]) -> Dict[str, AestheticScores]:
        ids = list(inputs)
        results = await asyncio.gather(*(self.score(inputs[i].audio) for i in ids))
        return dict(zip(ids, results))
