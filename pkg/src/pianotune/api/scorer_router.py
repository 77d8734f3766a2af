import asyncio
import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict

import numpy as np
from fastapi import APIRouter, Request
from fastapi.responses import JSONResponse, PlainTextResponse

from pianotune.api.responses import ErrorResponse, MockStateResponse, ScoreWireResponse
from pianotune.audio import AudioClip, read_wav, rms
from pianotune.errors import AudioFormatError
from pianotune.version import get_version_info

logger = logging.getLogger(__name__)


@dataclass
class MockScorerState:
    """Failure injection knobs, mutable while the server runs.

    `pending_failures` holds HTTP statuses returned (and consumed) by the next
    requests, before any normal answer.
    """

    pending_failures: Deque[int] = field(default_factory=deque)
    delay_seconds: float = 0.0
    malformed_body: str | None = None
    fixed_ratings: Dict[str, float] | None = None
    required_token: str | None = None
    requests_served: int = 0

    def fail_next(self, *statuses: int) -> None:
        self.pending_failures.extend(statuses)


def mock_ratings(clip: AudioClip) -> ScoreWireResponse:
    """Deterministic ratings from loudness and brightness of the clip."""
    loudness = min(rms(clip) / 0.2, 1.0)
    if len(clip) > 1:
        crossings = np.count_nonzero(np.signbit(clip.samples[1:]) != np.signbit(clip.samples[:-1]))
        brightness = min(crossings / (len(clip) - 1) * 20.0, 1.0)
    else:
        brightness = 0.0
    duration = min(clip.duration_seconds / 10.0, 1.0)
    enjoyment = 1.0 + 6.0 * loudness + 3.0 * duration * loudness
    return ScoreWireResponse(
        CE=round(enjoyment, 4),
        CU=round(min(0.5 + 0.9 * enjoyment, 10.0), 4),
        PC=round(1.0 + 4.0 * brightness, 4),
        PQ=round(2.0 + 6.0 * loudness * (1.0 - 0.5 * brightness), 4),
    )


def create_scorer_router() -> APIRouter:
    """Create a router speaking the remote scorer protocol."""
    router = APIRouter()

    def _error(status_code: int, message: str, error_code: str) -> JSONResponse:
        body = ErrorResponse(message=message, error_code=error_code)
        return JSONResponse(status_code=status_code, content=body.model_dump())

    @router.get("/health")
    async def health_check() -> dict:
        """Health check endpoint for monitoring and testing."""
        return {"status": "ok"}

    @router.get("/version")
    async def version() -> dict:
        """Return version info including git commit hash."""
        return get_version_info()

    @router.get("/state")
    async def get_state(request: Request) -> MockStateResponse:
        state: MockScorerState = request.app.state.scorer_state
        return MockStateResponse(
            requests_served=state.requests_served,
            pending_failures=list(state.pending_failures),
            delay_seconds=state.delay_seconds,
        )

    @router.post("/score", response_model=None)
    async def score(request: Request) -> JSONResponse | PlainTextResponse | ScoreWireResponse:
        state: MockScorerState = request.app.state.scorer_state
        state.requests_served += 1

        if state.delay_seconds > 0:
            await asyncio.sleep(state.delay_seconds)

        if state.required_token is not None:
            if request.headers.get("authorization") != f"Bearer {state.required_token}":
                return _error(401, "Missing or invalid bearer token", "unauthorized")

        if state.pending_failures:
            status = state.pending_failures.popleft()
            logger.debug("Injecting HTTP %d", status)
            return _error(status, f"Injected failure {status}", "injected_failure")

        if state.malformed_body is not None:
            return PlainTextResponse(state.malformed_body, media_type="application/json")

        content_type = request.headers.get("content-type", "")
        if not content_type.startswith("audio/wav"):
            return _error(415, f"Expected audio/wav, got {content_type or 'nothing'}", "unsupported_media_type")

        try:
            clip = read_wav(await request.body())
        except AudioFormatError as e:
            return _error(400, str(e), "bad_audio")

        if state.fixed_ratings is not None:
            return ScoreWireResponse.model_validate(state.fixed_ratings)
        return mock_ratings(clip)

    return router
